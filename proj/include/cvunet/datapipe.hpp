// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cvunet/dsp.hpp"

namespace cvu {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// WAV I/O. RIFF/WAVE, mono, 16 kHz, PCM16 or IEEE float32. No resampling:
// anything else is rejected with a descriptive error.
// ---------------------------------------------------------------------------

namespace wavio {

inline uint32_t rd_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
inline uint16_t rd_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace wavio

inline Waveform load_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open wav file: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw DataError("not a RIFF/WAVE file: " + path);

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  size_t data_off = 0, data_len = 0;
  size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::string id(reinterpret_cast<char*>(buf.data() + pos), 4);
    const uint32_t len = wavio::rd_u32(buf.data() + pos + 4);
    const size_t body = pos + 8;
    if (id == "fmt " && body + 16 <= buf.size()) {
      format = wavio::rd_u16(buf.data() + body);
      channels = wavio::rd_u16(buf.data() + body + 2);
      rate = wavio::rd_u32(buf.data() + body + 4);
      bits = wavio::rd_u16(buf.data() + body + 14);
    } else if (id == "data") {
      data_off = body;
      data_len = std::min<size_t>(len, buf.size() - body);
    }
    pos = body + len + (len & 1);
  }
  if (data_off == 0) throw DataError("wav file has no data chunk: " + path);
  if (channels != 1)
    throw DataError("wav must be mono, got " + std::to_string(channels) + " channels: " + path);
  if (rate != kSampleRate)
    throw DataError("wav must be 16000 Hz, got " + std::to_string(rate) + " Hz: " + path);

  Waveform w;
  if (format == 1 && bits == 16) {
    const size_t n = data_len / 2;
    w.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
      const int16_t s = static_cast<int16_t>(wavio::rd_u16(buf.data() + data_off + 2 * i));
      // mirror of the encoder's *32767 so a full-scale round trip is exact
      w.samples[i] = static_cast<float>(s) / 32767.0f;
    }
  } else if (format == 3 && bits == 32) {
    const size_t n = data_len / 4;
    w.samples.resize(n);
    std::memcpy(w.samples.data(), buf.data() + data_off, n * 4);
  } else {
    throw DataError("unsupported wav codec (format=" + std::to_string(format) +
                    ", bits=" + std::to_string(bits) + "): " + path);
  }
  return w;
}

/// Writes PCM16, clipping to [-1, 1].
inline void save_wav(const Waveform& w, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write wav file: " + path);
  const uint32_t n = static_cast<uint32_t>(w.samples.size());
  const uint32_t data_bytes = n * 2;
  auto w32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  auto w16 = [&](uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
  f.write("RIFF", 4);
  w32(36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  w32(16);
  w16(1);  // PCM
  w16(1);  // mono
  w32(kSampleRate);
  w32(kSampleRate * 2);
  w16(2);
  w16(16);
  f.write("data", 4);
  w32(data_bytes);
  for (float s : w.samples) {
    const float c = std::min(1.0f, std::max(-1.0f, s));
    const int16_t q = static_cast<int16_t>(std::lrintf(c * 32767.0f));
    w16(static_cast<uint16_t>(q));
  }
  if (!f) throw DataError("wav write failed: " + path);
}

// ---------------------------------------------------------------------------
// SNR-controlled mixing
// ---------------------------------------------------------------------------

struct MixtureRecord {
  Waveform clean, noise, mixture;
  double snr_db = 0;
  std::string speaker_id, noise_id;
  std::string split;  // train / val / test
};

inline double rms(const std::vector<float>& x) {
  double e = 0;
  for (float v : x) e += static_cast<double>(v) * v;
  return std::sqrt(e / std::max<size_t>(1, x.size()));
}

/// mixture = clean + gain * noise with gain chosen so the achieved SNR equals
/// `snr_db`. Noise shorter than the clean signal is tiled from `noise_offset`.
inline MixtureRecord mix_at_snr(const Waveform& clean, const Waveform& noise, double snr_db,
                                size_t noise_offset = 0) {
  if (clean.samples.empty()) throw DataError("mix_at_snr: empty clean signal");
  if (noise.samples.empty()) throw DataError("mix_at_snr: empty noise signal");
  MixtureRecord r;
  r.clean = clean;
  r.snr_db = snr_db;
  // loop/truncate noise to clean length
  r.noise.samples.resize(clean.samples.size());
  for (size_t i = 0; i < clean.samples.size(); ++i)
    r.noise.samples[i] = noise.samples[(noise_offset + i) % noise.samples.size()];

  const double rms_c = rms(clean.samples), rms_n = rms(r.noise.samples);
  if (rms_c <= 0) throw DataError("mix_at_snr: silent clean signal");
  if (rms_n <= 0) throw DataError("mix_at_snr: silent noise signal");
  const double gain = (rms_c / rms_n) * std::pow(10.0, -snr_db / 20.0);
  for (auto& v : r.noise.samples) v = static_cast<float>(v * gain);
  r.mixture.samples.resize(clean.samples.size());
  for (size_t i = 0; i < clean.samples.size(); ++i)
    r.mixture.samples[i] = clean.samples[i] + r.noise.samples[i];
  return r;
}

// ---------------------------------------------------------------------------
// Segmentation into fixed training frames
// ---------------------------------------------------------------------------

/// Overlapping windows every `hop` samples; the final partial window is
/// zero-padded. count = max(1, ceil((len - seg_len)/hop) + 1).
inline std::vector<std::vector<float>> segment(const std::vector<float>& w, int64_t seg_len,
                                               int64_t hop) {
  if (w.empty()) throw DataError("segment: empty waveform");
  if (hop <= 0) throw ConfigError("segment: hop must be > 0");
  const int64_t len = static_cast<int64_t>(w.size());
  int64_t count = 1;
  if (len > seg_len) count = (len - seg_len + hop - 1) / hop + 1;
  std::vector<std::vector<float>> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t s = 0; s < count; ++s) {
    std::vector<float> seg(static_cast<size_t>(seg_len), 0.0f);
    const int64_t start = s * hop;
    const int64_t n = std::min<int64_t>(seg_len, len - start);
    for (int64_t i = 0; i < n; ++i) seg[static_cast<size_t>(i)] = w[static_cast<size_t>(start + i)];
    out.push_back(std::move(seg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest: one JSON object per line, paths relative to the manifest location.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string clean, noise, mixture;  // relative paths
  double snr_db = 0;
  std::string split, speaker_id, noise_id;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  fs::path dir;  // directory the manifest lives in (paths resolve against it)

  std::vector<ManifestEntry> split_entries(const std::string& split) const {
    std::vector<ManifestEntry> out;
    for (auto& e : entries)
      if (e.split == split) out.push_back(e);
    return out;
  }
};

inline void save_manifest(const Manifest& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write manifest: " + path);
  for (auto& e : m.entries) {
    nlohmann::json j{{"clean", e.clean},   {"noise", e.noise},
                     {"mixture", e.mixture}, {"snr_db", e.snr_db},
                     {"split", e.split},   {"speaker_id", e.speaker_id},
                     {"noise_id", e.noise_id}};
    f << j.dump() << "\n";
  }
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path);
  Manifest m;
  m.dir = fs::absolute(fs::path(path)).parent_path();
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw DataError("manifest parse error at line " + std::to_string(lineno) + ": " + e.what());
    }
    ManifestEntry e;
    e.clean = j.at("clean").get<std::string>();
    e.noise = j.at("noise").get<std::string>();
    e.mixture = j.at("mixture").get<std::string>();
    e.snr_db = j.at("snr_db").get<double>();
    e.split = j.at("split").get<std::string>();
    e.speaker_id = j.at("speaker_id").get<std::string>();
    e.noise_id = j.at("noise_id").get<std::string>();
    m.entries.push_back(std::move(e));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic desk-scale corpus: harmonic complexes with pitch/formant drift and
// amplitude modulation stand in for speech; white / pink / band-passed
// babble-proxy signals stand in for noise. Splits are disjoint by generator
// id, so test "speakers" and noise types are unseen in training.
// ---------------------------------------------------------------------------

struct SynthOptions {
  uint64_t seed = 1;
  int n_utterances = 20;
  double snr_lo = 0.0, snr_hi = 20.0;
  double duration_s = 2.0;
};

namespace detail_synth {

template <typename Rng>
std::vector<float> synth_voice(Rng& rng, int64_t n, double f0_base) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double drift_rate = 0.5 + 2.0 * uni(rng);   // Hz of pitch wobble
  const double drift_depth = 0.05 + 0.1 * uni(rng); // relative depth
  const double am_rate = 2.0 + 3.0 * uni(rng);      // syllabic modulation
  const int harmonics = 12;
  std::vector<double> hamp(harmonics);
  // formant-ish spectral envelope, two random peaks
  const double fmt1 = 300 + 500 * uni(rng), fmt2 = 1200 + 1500 * uni(rng);
  for (int h = 0; h < harmonics; ++h) {
    const double f = f0_base * (h + 1);
    const double g1 = std::exp(-std::pow((f - fmt1) / 250.0, 2));
    const double g2 = 0.6 * std::exp(-std::pow((f - fmt2) / 400.0, 2));
    hamp[h] = (0.15 + g1 + g2) / (1.0 + 0.3 * h);
  }
  std::vector<float> x(static_cast<size_t>(n));
  double phase[harmonics] = {0};
  for (int64_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    const double f0 = f0_base * (1.0 + drift_depth * std::sin(2 * M_PI * drift_rate * t));
    const double am = 0.55 + 0.45 * std::sin(2 * M_PI * am_rate * t);
    double s = 0;
    for (int h = 0; h < harmonics; ++h) {
      phase[h] += 2 * M_PI * f0 * (h + 1) / kSampleRate;
      s += hamp[h] * std::sin(phase[h]);
    }
    x[static_cast<size_t>(i)] = static_cast<float>(0.25 * am * s);
  }
  return x;
}

template <typename Rng>
std::vector<float> synth_noise(Rng& rng, int64_t n, int kind) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<float> x(static_cast<size_t>(n));
  if (kind == 0) {  // white
    for (auto& v : x) v = static_cast<float>(0.1 * gauss(rng));
  } else if (kind == 1) {  // pink via Voss-style one-pole cascade
    double b0 = 0, b1 = 0, b2 = 0;
    for (auto& v : x) {
      const double w = gauss(rng);
      b0 = 0.99765 * b0 + w * 0.0990460;
      b1 = 0.96300 * b1 + w * 0.2965164;
      b2 = 0.57000 * b2 + w * 1.0526913;
      v = static_cast<float>(0.03 * (b0 + b1 + b2 + w * 0.1848));
    }
  } else {  // babble proxy: band-passed modulated noise
    double lp = 0, hp_prev_in = 0, hp_prev_out = 0;
    const double a_lp = std::exp(-2 * M_PI * 3000.0 / kSampleRate);
    const double a_hp = std::exp(-2 * M_PI * 300.0 / kSampleRate);
    for (int64_t i = 0; i < n; ++i) {
      const double w = gauss(rng);
      lp = a_lp * lp + (1 - a_lp) * w;
      const double hp = a_hp * (hp_prev_out + lp - hp_prev_in);
      hp_prev_in = lp;
      hp_prev_out = hp;
      const double t = static_cast<double>(i) / kSampleRate;
      const double am = 0.6 + 0.4 * std::sin(2 * M_PI * 4.0 * t + 0.7);
      x[static_cast<size_t>(i)] = static_cast<float>(0.5 * am * hp);
    }
  }
  return x;
}

}  // namespace detail_synth

/// Generates a deterministic synthetic corpus under `out_dir` and writes
/// manifest.jsonl there. Returns the manifest.
inline Manifest synth_corpus(const SynthOptions& opt, const std::string& out_dir) {
  if (opt.n_utterances < 1) throw ConfigError("synth_corpus: need at least one utterance");
  fs::create_directories(fs::path(out_dir) / "clean");
  fs::create_directories(fs::path(out_dir) / "noise");
  fs::create_directories(fs::path(out_dir) / "mixture");

  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> snr_dist(opt.snr_lo, opt.snr_hi);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  Manifest m;
  m.dir = fs::absolute(out_dir);
  const int64_t n = static_cast<int64_t>(opt.duration_s * kSampleRate);
  const int n_train = std::max(1, static_cast<int>(opt.n_utterances * 0.7));
  const int n_val = std::max(1, static_cast<int>(opt.n_utterances * 0.15));

  for (int i = 0; i < opt.n_utterances; ++i) {
    const std::string split =
        i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    // per-utterance generator ids; each "speaker" is a fresh pitch/formant
    // draw, so test speakers are unseen while staying in-distribution
    const double f0 = 100.0 + 140.0 * uni(rng);
    const int noise_kind = i % 3;
    const std::string spk = "spk" + std::to_string(i);
    const std::string nid = "noise" + std::to_string(noise_kind) + "_" + std::to_string(i);

    Waveform clean, noise;
    clean.samples = detail_synth::synth_voice(rng, n, f0);
    noise.samples = detail_synth::synth_noise(rng, n, noise_kind);
    const double snr = snr_dist(rng);
    MixtureRecord rec = mix_at_snr(clean, noise, snr);

    const std::string base = "utt" + std::to_string(i) + ".wav";
    save_wav(rec.clean, (fs::path(out_dir) / "clean" / base).string());
    save_wav(rec.noise, (fs::path(out_dir) / "noise" / base).string());
    save_wav(rec.mixture, (fs::path(out_dir) / "mixture" / base).string());

    ManifestEntry e;
    e.clean = "clean/" + base;
    e.noise = "noise/" + base;
    e.mixture = "mixture/" + base;
    e.snr_db = snr;
    e.split = split;
    e.speaker_id = spk;
    e.noise_id = nid;
    m.entries.push_back(std::move(e));
  }
  save_manifest(m, (fs::path(out_dir) / "manifest.jsonl").string());
  return m;
}

}  // namespace cvu
