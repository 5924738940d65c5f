#include <cstring>
#include <fstream>

#include "ms2s/error.hpp"
#include "ms2s/features.hpp"
#include "ms2s/fileio.hpp"

namespace ms2s {

namespace {

struct WavInfo {
  uint16_t format = 0;  // 1 = PCM, 3 = IEEE float
  uint16_t channels = 0;
  uint32_t sample_rate = 0;
  uint16_t bits = 0;
  std::streampos data_pos;
  uint32_t data_bytes = 0;
};

WavInfo parse_wav_header(std::ifstream& is, const std::string& path) {
  char tag[4];
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "RIFF", 4) != 0) throw FormatError(path + ": not a RIFF file");
  read_u32(is);  // riff size
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "WAVE", 4) != 0) throw FormatError(path + ": not a WAVE file");
  WavInfo info;
  bool have_fmt = false, have_data = false;
  while (is && !(have_fmt && have_data)) {
    is.read(tag, 4);
    if (!is) break;
    uint32_t chunk_size = read_u32(is);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw FormatError(path + ": fmt chunk too small");
      uint32_t fmt_ch = read_u32(is);  // u16 format | u16 channels
      info.format = static_cast<uint16_t>(fmt_ch & 0xffff);
      info.channels = static_cast<uint16_t>(fmt_ch >> 16);
      info.sample_rate = read_u32(is);
      read_u32(is);  // byte rate
      uint32_t align_bits = read_u32(is);  // u16 block align | u16 bits
      info.bits = static_cast<uint16_t>(align_bits >> 16);
      if (chunk_size > 16) is.seekg(chunk_size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      info.data_pos = is.tellg();
      info.data_bytes = chunk_size;
      have_data = true;
      is.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
    } else {
      is.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
    }
  }
  if (!have_fmt || !have_data) throw FormatError(path + ": missing fmt/data chunk");
  return info;
}

}  // namespace

int wav_channel_count(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open: " + path);
  return parse_wav_header(is, path).channels;
}

AudioClip read_wav(const std::string& path, int channel) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open: " + path);
  WavInfo info = parse_wav_header(is, path);
  if (info.format != 1 && info.format != 3)
    throw FormatError(path + ": unsupported codec " + std::to_string(info.format) +
                      " (PCM16 and float32 only)");
  if (info.format == 1 && info.bits != 16)
    throw FormatError(path + ": unsupported PCM bit depth " + std::to_string(info.bits));
  if (info.format == 3 && info.bits != 32)
    throw FormatError(path + ": unsupported float bit depth " + std::to_string(info.bits));
  if (info.channels == 0) throw FormatError(path + ": zero channels");
  if (channel < 0 || channel >= info.channels)
    throw InputError(path + ": channel " + std::to_string(channel) + " out of range (have " +
                     std::to_string(info.channels) + ")");
  if (info.sample_rate != 16000)
    throw InputError(path + ": sample rate must be 16000, got " + std::to_string(info.sample_rate));

  const uint32_t bytes_per_sample = info.bits / 8;
  const uint32_t frame_bytes = bytes_per_sample * info.channels;
  const uint32_t n = info.data_bytes / frame_bytes;
  if (n == 0) throw InputError(path + ": empty audio");

  AudioClip clip;
  clip.sample_rate = static_cast<int>(info.sample_rate);
  clip.samples.resize(n);
  is.clear();
  is.seekg(info.data_pos);
  std::vector<char> raw(info.data_bytes);
  is.read(raw.data(), info.data_bytes);
  if (!is) throw FormatError(path + ": truncated data chunk");
  for (uint32_t i = 0; i < n; ++i) {
    const char* p = raw.data() + i * frame_bytes + channel * bytes_per_sample;
    if (info.format == 1) {
      int16_t v;
      std::memcpy(&v, p, 2);
      clip.samples[i] = static_cast<double>(v) / 32768.0;
    } else {
      float v;
      std::memcpy(&v, p, 4);
      clip.samples[i] = static_cast<double>(v);
    }
  }
  return clip;
}

void write_wav_pcm16(const std::string& path, const AudioClip& clip) {
  write_wav_pcm16_multi(path, {clip.samples}, clip.sample_rate);
}

void write_wav_pcm16_multi(const std::string& path, const std::vector<std::vector<double>>& channels,
                           int sample_rate) {
  if (channels.empty() || channels[0].empty()) throw InputError("write_wav: no samples");
  const uint32_t nch = static_cast<uint32_t>(channels.size());
  const uint32_t n = static_cast<uint32_t>(channels[0].size());
  for (const auto& c : channels)
    if (c.size() != n) throw InputError("write_wav: channel length mismatch");
  const uint32_t data_bytes = n * nch * 2;
  atomic_write_file(path, [&](std::ostream& os) {
    os.write("RIFF", 4);
    write_u32(os, 36 + data_bytes);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    write_u32(os, 16);
    write_u32(os, 1u | (static_cast<uint32_t>(nch) << 16));          // PCM, channels
    write_u32(os, static_cast<uint32_t>(sample_rate));
    write_u32(os, static_cast<uint32_t>(sample_rate) * nch * 2);     // byte rate
    write_u32(os, (nch * 2u) | (16u << 16));                          // block align, bits
    os.write("data", 4);
    write_u32(os, data_bytes);
    for (uint32_t i = 0; i < n; ++i)
      for (uint32_t c = 0; c < nch; ++c) {
        double v = channels[c][i] * 32768.0;
        int32_t q = static_cast<int32_t>(std::lround(v));
        if (q > 32767) q = 32767;
        if (q < -32768) q = -32768;
        int16_t s = static_cast<int16_t>(q);
        char buf[2];
        std::memcpy(buf, &s, 2);
        os.write(buf, 2);
      }
  });
}

}  // namespace ms2s
