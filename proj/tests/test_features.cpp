#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ms2s/features.hpp"
#include "ms2s/fileio.hpp"
#include "testutil.hpp"

using namespace ms2s;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

AudioClip tone(double freq, double seconds, double amp = 0.5) {
  AudioClip c;
  c.samples.resize(static_cast<size_t>(seconds * 16000));
  for (size_t i = 0; i < c.samples.size(); ++i)
    c.samples[i] = amp * std::sin(2.0 * M_PI * freq * static_cast<double>(i) / 16000.0);
  return c;
}

}  // namespace

TEST_CASE("wav round-trip is sample-exact for PCM16") {
  Rng rng = make_rng(4);
  AudioClip c;
  c.samples.resize(1600);
  std::uniform_int_distribution<int> dist(-32768, 32767);
  for (auto& s : c.samples) s = dist(rng) / 32768.0;
  c.samples[0] = 32767 / 32768.0;  // extreme value
  std::string p = tmp_path("rt.wav");
  write_wav_pcm16(p, c);
  AudioClip back = read_wav(p);
  REQUIRE(back.samples.size() == c.samples.size());
  for (size_t i = 0; i < c.samples.size(); ++i) CHECK(back.samples[i] == c.samples[i]);
  CHECK(back.samples[0] == doctest::Approx(0.999969482421875));  // 32767/32768
  std::remove(p.c_str());
}

TEST_CASE("wav: silence, channels, malformed input") {
  AudioClip silence;
  silence.samples.assign(16000, 0.0);
  std::string p = tmp_path("sil.wav");
  write_wav_pcm16(p, silence);
  AudioClip back = read_wav(p);
  CHECK(back.samples.size() == 16000);
  for (double v : back.samples) CHECK(v == 0.0);
  std::remove(p.c_str());

  // multi-channel: pick each channel back out
  std::vector<std::vector<double>> two = {std::vector<double>(800, 0.25),
                                          std::vector<double>(800, -0.5)};
  std::string p2 = tmp_path("two.wav");
  write_wav_pcm16_multi(p2, two, 16000);
  CHECK(wav_channel_count(p2) == 2);
  CHECK(read_wav(p2, 0).samples[10] == doctest::Approx(0.25).epsilon(1e-4));
  CHECK(read_wav(p2, 1).samples[10] == doctest::Approx(-0.5).epsilon(1e-4));
  CHECK_THROWS_AS(read_wav(p2, 2), InputError);
  std::remove(p2.c_str());

  std::string bad = tmp_path("bad.wav");
  atomic_write_text(bad, "this is not a wav file at all........");
  CHECK_THROWS_AS(read_wav(bad), FormatError);
  std::remove(bad.c_str());
}

TEST_CASE("fbank: silence hits the log floor everywhere") {
  AudioClip silence;
  silence.samples.assign(16000, 0.0);
  FeatureMatrix fm = fbank(silence);
  const double expect = std::log(1e-10);  // -23.0259
  CHECK(expect == doctest::Approx(-23.02585093));
  auto d = fm.frames.data();
  for (scalar v : d) CHECK(v == doctest::Approx(expect));
}

TEST_CASE("fbank: 1 kHz tone peaks in the filter with nearest center") {
  FeatureMatrix fm = fbank(tone(1000.0, 1.0));
  auto centers = mel_center_frequencies(40, 16000.0);
  int expect_bin = 0;
  for (int m = 1; m < 40; ++m)
    if (std::fabs(centers[static_cast<size_t>(m)] - 1000.0) <
        std::fabs(centers[static_cast<size_t>(expect_bin)] - 1000.0))
      expect_bin = m;
  for (int64_t t = 0; t < fm.num_frames(); ++t) {
    int argmax = 0;
    for (int m = 1; m < 40; ++m)
      if (fm.frames.at(t, m) > fm.frames.at(t, argmax)) argmax = m;
    CHECK(argmax == expect_bin);
  }
}

TEST_CASE("fbank: framing arithmetic and reflect padding") {
  AudioClip c = tone(440.0, 8.0);
  FeatureMatrix fm = fbank(c);
  CHECK(fm.num_frames() == 798);  // 1 + (128000 - 400)/160
  Tensor padded = pad_rows_reflect(fm.frames, 800);
  CHECK(padded.dim(0) == 800);
  // reflected rows mirror the tail
  for (int64_t f = 0; f < 40; ++f) {
    CHECK(padded.at(798, f) == fm.frames.at(796, f));
    CHECK(padded.at(799, f) == fm.frames.at(795, f));
  }

  AudioClip tiny;
  tiny.samples.assign(200, 0.1);  // shorter than one 400-sample window
  CHECK_THROWS_AS(fbank(tiny), InputError);
}

TEST_CASE("fbank: shift by one hop shifts frames by one index") {
  Rng rng = make_rng(9);
  AudioClip c;
  c.samples.resize(16000);
  for (auto& s : c.samples) s = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  FeatureMatrix a = fbank(c);
  AudioClip shifted;
  shifted.samples.assign(c.samples.begin() + 160, c.samples.end());
  FeatureMatrix b = fbank(shifted);
  REQUIRE(b.num_frames() == a.num_frames() - 1);
  for (int64_t t = 1; t + 1 < b.num_frames(); ++t)
    for (int64_t f = 0; f < 40; ++f)
      CHECK(std::fabs(b.frames.at(t, f) - a.frames.at(t + 1, f)) <= 1e-6);
}

TEST_CASE("fbank: scaling the waveform by c adds exactly 2 ln c above the floor") {
  AudioClip c = tone(700.0, 1.0, 0.3);
  AudioClip c2 = c;
  for (auto& s : c2.samples) s *= 2.0;
  FeatureMatrix a = fbank(c), b = fbank(c2);
  const double shift = 2.0 * std::log(2.0);
  const double floor_val = std::log(1e-10);
  for (int64_t t = 0; t < a.num_frames(); ++t)
    for (int64_t f = 0; f < 40; ++f) {
      double va = a.frames.at(t, f);
      if (va > floor_val + 1.0 && b.frames.at(t, f) > floor_val + 1.0)
        CHECK(std::fabs(b.frames.at(t, f) - va - shift) <= 1e-6);
    }
}

TEST_CASE("standardize: constant input, fixed point, measured moments") {
  FeatureMatrix cst;
  cst.frames = Tensor::full({50, 4}, 3.25);
  FeatureMatrix z = standardize(cst);
  auto zd = z.frames.data();
  for (scalar v : zd) CHECK(v == 0.0);

  Rng rng = make_rng(21);
  FeatureMatrix fm;
  fm.frames = Tensor::randn({200, 8}, rng, 2.5);
  FeatureMatrix s1 = standardize(fm);
  for (int64_t c = 0; c < 8; ++c) {
    double mean = 0, var = 0;
    for (int64_t t = 0; t < 200; ++t) mean += s1.frames.at(t, c);
    mean /= 200;
    for (int64_t t = 0; t < 200; ++t) {
      double d = s1.frames.at(t, c) - mean;
      var += d * d;
    }
    var /= 200;
    CHECK(std::fabs(mean) <= 1e-6);
    CHECK(std::fabs(std::sqrt(var) - 1.0) <= 1e-6);
  }
  FeatureMatrix s2 = standardize(s1);  // fixed point
  CHECK(testutil::max_abs_diff(s2.frames, s1.frames) <= 1e-6);
}

TEST_CASE("feature cache round-trip (MS2SFEAT)") {
  Rng rng = make_rng(33);
  FeatureMatrix fm;
  fm.frames = Tensor::randn({17, 40}, rng);
  fm.frame_hop_s = 0.010;
  std::string p = tmp_path("feat.bin");
  write_feature_cache(p, fm);
  FeatureMatrix back = read_feature_cache(p);
  CHECK(back.num_frames() == 17);
  CHECK(back.feature_dim() == 40);
  CHECK(back.frame_hop_s == doctest::Approx(0.010));
  // values quantized to f32 on disk
  CHECK(testutil::max_abs_diff(back.frames, fm.frames) <= 1e-6);
  std::remove(p.c_str());

  std::string bad = tmp_path("feat_bad.bin");
  atomic_write_text(bad, "XXXXXXXXsomething");
  CHECK_THROWS_AS(read_feature_cache(bad), FormatError);
  std::remove(bad.c_str());
}
