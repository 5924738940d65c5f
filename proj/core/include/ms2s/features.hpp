#pragma once

#include <string>
#include <vector>

#include "ms2s/tensor.hpp"

namespace ms2s {

// Mono waveform, samples in [-1, 1]. Only 16 kHz input is supported.
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 16000;
};

// T x F log-Mel frames at a fixed hop. `frames` carries no gradient.
struct FeatureMatrix {
  Tensor frames;                // T x F
  double frame_hop_s = 0.010;
  int64_t num_frames() const { return frames.dim(0); }
  int64_t feature_dim() const { return frames.dim(1); }
};

// Reads RIFF/WAVE, PCM16 or float32. Multi-channel files yield the requested
// channel (default: first).
AudioClip read_wav(const std::string& path, int channel = 0);
int wav_channel_count(const std::string& path);
void write_wav_pcm16(const std::string& path, const AudioClip& clip);
// Multi-channel PCM16 writer (channels interleaved on disk).
void write_wav_pcm16_multi(const std::string& path, const std::vector<std::vector<double>>& channels,
                           int sample_rate);

struct FbankOptions {
  int n_mels = 40;
  double win_s = 0.025;
  double hop_s = 0.010;
  double preemphasis = 0.97;
  double log_floor = 1e-10;
  int nfft = 512;
};

// Per frame: pre-emphasis, Hann window, power spectrum, triangular Mel bank
// spanning 0 Hz..Nyquist, natural log with floor. T = 1 + (len - win) / hop;
// the final partial window is dropped.
FeatureMatrix fbank(const AudioClip& clip, const FbankOptions& opt = {});

// Per-dimension zero mean / unit variance over T; zero-variance dims map to 0.
FeatureMatrix standardize(const FeatureMatrix& fm);

// Reflect rows past the end (bouncing at the boundary) until target_rows.
Tensor pad_rows_reflect(const Tensor& x, int64_t target_rows);

// Nominal center frequency in Hz of each triangular filter.
std::vector<double> mel_center_frequencies(int n_mels, double sample_rate);

// Mean-square energy per frame, same framing as fbank.
std::vector<double> frame_energies(const AudioClip& clip, double win_s = 0.025, double hop_s = 0.010);

// Feature cache: header {magic "MS2SFEAT", version u32, T u32, F u32,
// hop_ms u32} followed by row-major 32-bit floats, little-endian.
void write_feature_cache(const std::string& path, const FeatureMatrix& fm);
FeatureMatrix read_feature_cache(const std::string& path);

}  // namespace ms2s
