#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>

#include "ms2s/error.hpp"
#include "ms2s/features.hpp"
#include "ms2s/fileio.hpp"

namespace ms2s {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Iterative radix-2 Cooley-Tukey, in place. n must be a power of two.
void fft(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * kPi / static_cast<double>(len);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0);
      for (size_t j = 0; j < len / 2; ++j) {
        auto u = a[i + j];
        auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters on FFT bins, mel-equispaced between 0 Hz and Nyquist.
std::vector<std::vector<double>> mel_filterbank(int n_mels, double sample_rate, int nfft) {
  const int n_bins = nfft / 2 + 1;
  const double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(static_cast<size_t>(n_mels) + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    edges[static_cast<size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));
  std::vector<std::vector<double>> bank(static_cast<size_t>(n_mels),
                                        std::vector<double>(static_cast<size_t>(n_bins), 0.0));
  for (int m = 0; m < n_mels; ++m) {
    double lo = edges[static_cast<size_t>(m)], mid = edges[static_cast<size_t>(m) + 1],
           hi = edges[static_cast<size_t>(m) + 2];
    for (int b = 0; b < n_bins; ++b) {
      double hz = static_cast<double>(b) * sample_rate / nfft;
      double w = 0.0;
      if (hz >= lo && hz <= mid && mid > lo)
        w = (hz - lo) / (mid - lo);
      else if (hz > mid && hz <= hi && hi > mid)
        w = (hi - hz) / (hi - mid);
      bank[static_cast<size_t>(m)][static_cast<size_t>(b)] = w;
    }
  }
  return bank;
}

}  // namespace

std::vector<double> mel_center_frequencies(int n_mels, double sample_rate) {
  const double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> centers(static_cast<size_t>(n_mels));
  for (int m = 0; m < n_mels; ++m)
    centers[static_cast<size_t>(m)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) / (n_mels + 1));
  return centers;
}

FeatureMatrix fbank(const AudioClip& clip, const FbankOptions& opt) {
  const int sr = clip.sample_rate;
  const int win = static_cast<int>(std::lround(opt.win_s * sr));
  const int hop = static_cast<int>(std::lround(opt.hop_s * sr));
  const int64_t len = static_cast<int64_t>(clip.samples.size());
  if (len < win)
    throw InputError("fbank: clip shorter than one window (" + std::to_string(len) + " < " +
                     std::to_string(win) + " samples)");
  if (opt.nfft < win) throw ConfigError("fbank: nfft smaller than window");
  const int64_t t_frames = 1 + (len - win) / hop;

  std::vector<double> hann(static_cast<size_t>(win));
  for (int i = 0; i < win; ++i)
    hann[static_cast<size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / (win - 1));

  auto bank = mel_filterbank(opt.n_mels, sr, opt.nfft);
  const int n_bins = opt.nfft / 2 + 1;

  FeatureMatrix fm;
  fm.frame_hop_s = opt.hop_s;
  fm.frames = Tensor({t_frames, opt.n_mels});
  auto out = fm.frames.data();

  std::vector<std::complex<double>> buf(static_cast<size_t>(opt.nfft));
  std::vector<double> power(static_cast<size_t>(n_bins));
  for (int64_t t = 0; t < t_frames; ++t) {
    const double* src = clip.samples.data() + t * hop;
    // pre-emphasis within the frame, then Hann
    for (int i = 0; i < win; ++i) {
      double prev = (i > 0) ? src[i - 1] : src[0];
      buf[static_cast<size_t>(i)] = (src[i] - opt.preemphasis * prev) * hann[static_cast<size_t>(i)];
    }
    std::fill(buf.begin() + win, buf.end(), std::complex<double>(0.0));
    fft(buf);
    for (int b = 0; b < n_bins; ++b) power[static_cast<size_t>(b)] = std::norm(buf[static_cast<size_t>(b)]);
    for (int m = 0; m < opt.n_mels; ++m) {
      double acc = 0.0;
      const auto& filt = bank[static_cast<size_t>(m)];
      for (int b = 0; b < n_bins; ++b) acc += filt[static_cast<size_t>(b)] * power[static_cast<size_t>(b)];
      out[t * opt.n_mels + m] = static_cast<scalar>(std::log(std::max(acc, opt.log_floor)));
    }
  }
  return fm;
}

FeatureMatrix standardize(const FeatureMatrix& fm) {
  const int64_t t = fm.num_frames(), f = fm.feature_dim();
  FeatureMatrix out;
  out.frame_hop_s = fm.frame_hop_s;
  out.frames = Tensor({t, f});
  auto src = fm.frames.data();
  auto dst = out.frames.data();
  for (int64_t c = 0; c < f; ++c) {
    double mean = 0;
    for (int64_t r = 0; r < t; ++r) mean += src[r * f + c];
    mean /= static_cast<double>(t);
    double var = 0;
    for (int64_t r = 0; r < t; ++r) {
      double d = src[r * f + c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(t);
    if (var <= 0.0) {
      for (int64_t r = 0; r < t; ++r) dst[r * f + c] = 0;
    } else {
      double inv = 1.0 / std::sqrt(var);
      for (int64_t r = 0; r < t; ++r) dst[r * f + c] = static_cast<scalar>((src[r * f + c] - mean) * inv);
    }
  }
  return out;
}

Tensor pad_rows_reflect(const Tensor& x, int64_t target_rows) {
  const int64_t t = x.dim(0), f = x.dim(1);
  if (t >= target_rows) return x;
  Tensor out({target_rows, f});
  auto src = x.data();
  auto dst = out.data();
  std::copy(src.begin(), src.end(), dst.begin());
  const int64_t period = (t > 1) ? 2 * (t - 1) : 1;
  for (int64_t r = t; r < target_rows; ++r) {
    int64_t m = r % period;
    int64_t s = (m < t) ? m : period - m;  // bounce
    std::copy(src.begin() + s * f, src.begin() + (s + 1) * f, dst.begin() + r * f);
  }
  return out;
}

std::vector<double> frame_energies(const AudioClip& clip, double win_s, double hop_s) {
  const int sr = clip.sample_rate;
  const int win = static_cast<int>(std::lround(win_s * sr));
  const int hop = static_cast<int>(std::lround(hop_s * sr));
  const int64_t len = static_cast<int64_t>(clip.samples.size());
  if (len < win) throw InputError("frame_energies: clip shorter than one window");
  const int64_t t_frames = 1 + (len - win) / hop;
  std::vector<double> e(static_cast<size_t>(t_frames));
  for (int64_t t = 0; t < t_frames; ++t) {
    const double* src = clip.samples.data() + t * hop;
    double acc = 0;
    for (int i = 0; i < win; ++i) acc += src[i] * src[i];
    e[static_cast<size_t>(t)] = acc / win;
  }
  return e;
}

void write_feature_cache(const std::string& path, const FeatureMatrix& fm) {
  atomic_write_file(path, [&](std::ostream& os) {
    write_magic(os, "MS2SFEAT");
    write_u32(os, 1);  // version
    write_u32(os, static_cast<uint32_t>(fm.num_frames()));
    write_u32(os, static_cast<uint32_t>(fm.feature_dim()));
    write_u32(os, static_cast<uint32_t>(std::lround(fm.frame_hop_s * 1000.0)));
    auto d = fm.frames.data();
    for (scalar v : d) write_f32(os, static_cast<float>(v));
  });
}

FeatureMatrix read_feature_cache(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open: " + path);
  expect_magic(is, "MS2SFEAT", path);
  uint32_t version = read_u32(is);
  if (version != 1) throw FormatError(path + ": unsupported feature cache version");
  uint32_t t = read_u32(is), f = read_u32(is), hop_ms = read_u32(is);
  FeatureMatrix fm;
  fm.frame_hop_s = hop_ms / 1000.0;
  fm.frames = Tensor({static_cast<int64_t>(t), static_cast<int64_t>(f)});
  auto d = fm.frames.data();
  for (auto& v : d) v = static_cast<scalar>(read_f32(is));
  return fm;
}

}  // namespace ms2s
