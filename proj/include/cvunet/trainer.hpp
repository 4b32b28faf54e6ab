// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <iomanip>
#include <iostream>

#include "cvunet/datapipe.hpp"
#include "cvunet/objective.hpp"

namespace cvu {

// ---------------------------------------------------------------------------
// Training configuration. The JSON config file mirrors these field names.
// ---------------------------------------------------------------------------

struct TrainConfig {
  ModelConfig model;
  LossWeights loss;
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps_opt = 1e-8;
  int64_t batch_size = 4;
  int64_t steps = 1000;
  double grad_clip_norm = 5.0;
  uint64_t seed = 1;
  int64_t checkpoint_every = 500;
  std::string manifest;
  std::string out_dir = ".";

  void validate() const {
    model.validate();
    loss.validate();
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("adam betas must be in [0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (steps < 1) throw ConfigError("steps must be >= 1");
  }
};

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("levels")) c.levels = j.at("levels").get<int64_t>();
  if (j.contains("channels")) c.channels = j.at("channels").get<std::vector<int64_t>>();
  if (j.contains("dilations")) c.dilations = j.at("dilations").get<std::vector<int64_t>>();
  if (j.contains("input_size")) {
    auto v = j.at("input_size").get<std::vector<int64_t>>();
    if (v.size() != 3 || v[0] != 2)
      throw ConfigError("input_size must be [2, T, F]");
    c.input_t = v[1];
    c.input_f = v[2];
  }
  if (j.contains("latent_dim")) c.latent_dim = j.at("latent_dim").get<int64_t>();
  if (j.contains("variational")) c.variational = j.at("variational").get<bool>();
  if (j.contains("self_attention")) c.self_attention = j.at("self_attention").get<bool>();
  if (j.contains("encoding")) c.encoding = encoding_from_name(j.at("encoding").get<std::string>());
  if (j.contains("bn_mode")) c.bn_mode = bn_mode_from_name(j.at("bn_mode").get<std::string>());
  if (j.contains("dilation_axes"))
    c.dilation_axes = dilation_axes_from_name(j.at("dilation_axes").get<std::string>());
  return c;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{
      {"levels", c.levels},
      {"channels", c.channels},
      {"dilations", c.dilations},
      {"input_size", std::vector<int64_t>{2, c.input_t, c.input_f}},
      {"latent_dim", c.latent_dim},
      {"variational", c.variational},
      {"self_attention", c.self_attention},
      {"encoding", encoding_name(c.encoding)},
      {"bn_mode", bn_mode_name(c.bn_mode)},
      {"dilation_axes", dilation_axes_name(c.dilation_axes)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    if (l.contains("w_mag")) c.loss.w_mag = l.at("w_mag").get<double>();
    if (l.contains("w_real")) c.loss.w_real = l.at("w_real").get<double>();
    if (l.contains("w_imag")) c.loss.w_imag = l.at("w_imag").get<double>();
    if (l.contains("w_sisdr")) c.loss.w_sisdr = l.at("w_sisdr").get<double>();
    if (l.contains("beta")) c.loss.beta = l.at("beta").get<double>();
    if (l.contains("mag_loss_scale"))
      c.loss.mag_loss_scale = l.at("mag_loss_scale").get<std::string>() == "log"
                                  ? MagLossScale::log
                                  : MagLossScale::linear;
  }
  if (j.contains("lr")) c.lr = j.at("lr").get<double>();
  if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
  if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
  if (j.contains("eps_opt")) c.eps_opt = j.at("eps_opt").get<double>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int64_t>();
  if (j.contains("steps")) c.steps = j.at("steps").get<int64_t>();
  if (j.contains("grad_clip_norm")) c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("checkpoint_every")) c.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
  if (j.contains("manifest")) c.manifest = j.at("manifest").get<std::string>();
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  return c;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  TrainConfig c = train_config_from_json(j);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Adam with bias correction, applied after global-norm gradient clipping.
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  int64_t step = 0;
  int64_t skipped = 0;  // steps dropped due to non-finite gradients

  static AdamState init(const ParamList<T>& params) {
    AdamState s;
    for (auto& [name, p] : params) {
      s.m.push_back(Tensor<T>::zeros(p.shape()));
      s.v.push_back(Tensor<T>::zeros(p.shape()));
    }
    return s;
  }
};

struct AdamHyper {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double grad_clip_norm = 5.0;
};

/// Returns false (and leaves parameters untouched) when a gradient is
/// non-finite. Gradients are read from each parameter's .grad().
template <typename T>
bool adam_step(const ParamList<T>& params, AdamState<T>& state, const AdamHyper& hp) {
  double norm_sq = 0;
  for (auto& [name, p] : params) {
    for (T g : p.grad().data) {
      if (!std::isfinite(static_cast<double>(g))) {
        ++state.skipped;
        return false;
      }
      norm_sq += static_cast<double>(g) * g;
    }
  }
  const double norm = std::sqrt(norm_sq);
  const double scale = (hp.grad_clip_norm > 0 && norm > hp.grad_clip_norm)
                           ? hp.grad_clip_norm / norm
                           : 1.0;
  ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& val = const_cast<Var<T>&>(params[i].second).value();
    const Tensor<T>& grad = params[i].second.grad();
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    for (int64_t k = 0; k < val.numel(); ++k) {
      const double g = static_cast<double>(grad[k]) * scale;
      m[k] = static_cast<T>(hp.beta1 * m[k] + (1.0 - hp.beta1) * g);
      v[k] = static_cast<T>(hp.beta2 * v[k] + (1.0 - hp.beta2) * g * g);
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      // epsilon inside the root: theta=0, g=1, lr=1e-3 -> -9.99999995e-4
      val[k] = static_cast<T>(val[k] - hp.lr * mhat / std::sqrt(vhat + hp.eps));
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Batch assembly: waveform segments -> encoded network inputs + loss targets.
// ---------------------------------------------------------------------------

template <typename T>
struct Batch {
  ComplexTensor<T> input;              // planes [B,1,T,F]
  Tensor<T> target_re, target_im;      // clean complex spectrogram [B,1,T,F]
  Tensor<T> target_wave;               // [B, seg_len]
};

template <typename T>
Batch<T> make_batch(const std::vector<const std::vector<float>*>& mix_segs,
                    const std::vector<const std::vector<float>*>& clean_segs,
                    Encoding encoding, const StftPlan<T>& plan) {
  const int64_t B = static_cast<int64_t>(mix_segs.size());
  const int64_t Tt = plan.frames, F = plan.bins;
  Batch<T> b{{Var<T>(), Var<T>()},
             Tensor<T>(Shape{B, 1, Tt, F}),
             Tensor<T>(Shape{B, 1, Tt, F}),
             Tensor<T>(Shape{B, plan.seg_len})};
  Tensor<T> in_re(Shape{B, 1, Tt, F}), in_im(in_re.shape);
  const int64_t plane = Tt * F;
  for (int64_t n = 0; n < B; ++n) {
    Tensor<T> mix(Shape{plan.seg_len}), clean(Shape{plan.seg_len});
    for (int64_t i = 0; i < plan.seg_len; ++i) {
      mix[i] = static_cast<T>((*mix_segs[n])[static_cast<size_t>(i)]);
      clean[i] = static_cast<T>((*clean_segs[n])[static_cast<size_t>(i)]);
    }
    std::copy(clean.data.begin(), clean.data.end(),
              b.target_wave.data.begin() + n * plan.seg_len);
    SpectroPair<T> ms = stft(Var<T>::constant(mix), plan);
    SpectroPair<T> cs = stft(Var<T>::constant(clean), plan);
    Tensor<T> enc = encode_spectrogram(ms.re.value(), ms.im.value(), encoding);
    std::copy_n(enc.data.data(), plane, in_re.data.data() + n * plane);
    std::copy_n(enc.data.data() + plane, plane, in_im.data.data() + n * plane);
    std::copy_n(cs.re.value().data.data(), plane, b.target_re.data.data() + n * plane);
    std::copy_n(cs.im.value().data.data(), plane, b.target_im.data.data() + n * plane);
  }
  b.input.re = Var<T>::constant(std::move(in_re));
  b.input.im = Var<T>::constant(std::move(in_im));
  return b;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  std::string checkpoint_path;
  std::string metrics_path;
  std::vector<LossBreakdown> history;
};

inline TrainResult train(const TrainConfig& cfg, bool verbose = true) {
  cfg.validate();
  Manifest manifest = load_manifest(cfg.manifest);
  auto train_entries = manifest.split_entries("train");
  if (train_entries.empty()) throw DataError("manifest has no train records");

  const StftPlan<float> plan = StftPlan<float>::make(cfg.model.input_t, cfg.model.input_f);

  // segment pool (mixture / clean pairs, non-overlapping training segments)
  std::vector<std::vector<float>> mix_pool, clean_pool;
  for (auto& e : train_entries) {
    Waveform mix, clean;
    try {
      mix = load_wav((manifest.dir / e.mixture).string());
      clean = load_wav((manifest.dir / e.clean).string());
    } catch (const DataError& err) {
      throw DataError(std::string(err.what()) + " (record speaker=" + e.speaker_id + ")");
    }
    auto ms = segment(mix.samples, plan.seg_len, plan.seg_len);
    auto cs = segment(clean.samples, plan.seg_len, plan.seg_len);
    for (size_t i = 0; i < ms.size(); ++i) {
      mix_pool.push_back(std::move(ms[i]));
      clean_pool.push_back(std::move(cs[i]));
    }
  }

  ComplexUNet<float> model(cfg.model, cfg.seed);
  AdamState<float> adam = AdamState<float>::init(model.parameters());
  AdamHyper hp{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_opt, cfg.grad_clip_norm};
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<size_t> pick(0, mix_pool.size() - 1);

  fs::create_directories(cfg.out_dir);
  const std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
  std::ofstream csv(metrics_path);
  csv << "step,mse_mag,mse_real,mse_imag,kl,sisdr_db,total\n";
  csv << std::setprecision(10);

  TrainResult result;
  result.metrics_path = metrics_path;
  for (int64_t step = 1; step <= cfg.steps; ++step) {
    std::vector<const std::vector<float>*> mixs, cleans;
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      const size_t i = pick(rng);
      mixs.push_back(&mix_pool[i]);
      cleans.push_back(&clean_pool[i]);
    }
    Batch<float> batch = make_batch(mixs, cleans, cfg.model.encoding, plan);
    auto fwd = model.forward(batch.input, /*training=*/true, rng);
    CompositeLoss<float> loss =
        composite_loss(fwd.output, cfg.model.encoding, batch.target_re, batch.target_im,
                       batch.target_wave, fwd.latent, cfg.loss, plan);
    if (!std::isfinite(loss.breakdown.total))
      throw NumericError("non-finite loss at step " + std::to_string(step));
    backward(loss.total);
    adam_step(model.parameters(), adam, hp);

    csv << step << "," << loss.breakdown.mse_mag << "," << loss.breakdown.mse_real << ","
        << loss.breakdown.mse_imag << "," << loss.breakdown.kl << ","
        << loss.breakdown.sisdr_db << "," << loss.breakdown.total << "\n";
    result.history.push_back(loss.breakdown);
    if (verbose && (step == 1 || step % 50 == 0))
      std::cerr << "step " << step << " total " << loss.breakdown.total << " sisdr "
                << loss.breakdown.sisdr_db << "\n";
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps)
      model.save_checkpoint(
          (fs::path(cfg.out_dir) / ("model_step" + std::to_string(step) + ".ckpt")).string());
  }
  if (adam.skipped > 0)
    std::cerr << "warning: " << adam.skipped << " steps skipped (non-finite gradients)\n";
  result.checkpoint_path = (fs::path(cfg.out_dir) / "model.ckpt").string();
  model.save_checkpoint(result.checkpoint_path);
  return result;
}

// ---------------------------------------------------------------------------
// Enhancement: 50%-overlap segmentation, per-segment inference, raised-cosine
// cross-fade stitching. Output length equals input length.
// ---------------------------------------------------------------------------

inline std::vector<float> enhance_wave(ComplexUNet<float>& model, const std::vector<float>& in) {
  const StftPlan<float> plan =
      StftPlan<float>::make(model.config().input_t, model.config().input_f);
  const int64_t seg = plan.seg_len, hop = seg / 2;
  auto segs = segment(in, seg, hop);
  std::vector<float> out(in.size(), 0.0f);
  std::vector<float> weight(in.size(), 0.0f);
  std::mt19937_64 rng(0);  // inference path draws no samples

  // raised-cosine ramps over the half-segment overlap
  std::vector<float> ramp(static_cast<size_t>(hop));
  for (int64_t i = 0; i < hop; ++i) {
    const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(hop);
    ramp[static_cast<size_t>(i)] = static_cast<float>(std::sin(0.5 * M_PI * x) *
                                                      std::sin(0.5 * M_PI * x));
  }

  const int64_t plane = plan.frames * plan.bins;
  for (size_t s = 0; s < segs.size(); ++s) {
    Tensor<float> wave(Shape{seg});
    std::copy(segs[s].begin(), segs[s].end(), wave.data.begin());
    SpectroPair<float> spec = stft(Var<float>::constant(wave), plan);
    Tensor<float> enc =
        encode_spectrogram(spec.re.value(), spec.im.value(), model.config().encoding);
    Tensor<float> re(Shape{1, 1, plan.frames, plan.bins}), im(re.shape);
    std::copy_n(enc.data.data(), plane, re.data.data());
    std::copy_n(enc.data.data() + plane, plane, im.data.data());
    auto fwd = model.forward({Var<float>::constant(std::move(re)),
                              Var<float>::constant(std::move(im))},
                             /*training=*/false, rng);
    SpectroPair<float> dec = decode_encoded(fwd.output.re, fwd.output.im, model.config().encoding);
    SpectroPair<float> flat{reshape(dec.re, Shape{plan.frames, plan.bins}),
                            reshape(dec.im, Shape{plan.frames, plan.bins})};
    Var<float> rec = istft(flat, plan);

    const int64_t off = static_cast<int64_t>(s) * hop;
    for (int64_t i = 0; i < seg; ++i) {
      const int64_t pos = off + i;
      if (pos >= static_cast<int64_t>(in.size())) break;
      float w = 1.0f;
      if (s > 0 && i < hop) w = ramp[static_cast<size_t>(i)];
      if (s + 1 < segs.size() && i >= seg - hop) w = 1.0f - ramp[static_cast<size_t>(i - (seg - hop))];
      out[static_cast<size_t>(pos)] += w * rec.value()[i];
      weight[static_cast<size_t>(pos)] += w;
    }
  }
  for (size_t i = 0; i < out.size(); ++i)
    if (weight[i] > 0) out[i] /= weight[i];
  return out;
}

inline void enhance_file(ComplexUNet<float>& model, const std::string& in_path,
                         const std::string& out_path) {
  Waveform in = load_wav(in_path);
  if (in.samples.empty()) throw DataError("input wav is empty: " + in_path);
  Waveform out;
  out.samples = enhance_wave(model, in.samples);
  save_wav(out, out_path);
}

// ---------------------------------------------------------------------------
// Evaluation report (Tables-1/2-style layout; PESQ and STOI columns are
// reserved for externally computed values).
// ---------------------------------------------------------------------------

struct EvalRow {
  std::string id;
  double snr_in = 0, sisdr_noisy = 0, sisdr_enhanced = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_noisy = 0, median_noisy = 0, std_noisy = 0;
  double mean_enh = 0, median_enh = 0, std_enh = 0;
  int warnings = 0;
};

namespace detail_eval {
inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}
inline double std_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}
}  // namespace detail_eval

inline EvalReport evaluate(ComplexUNet<float>& model, const Manifest& manifest,
                           const std::string& split, const std::string& out_dir) {
  auto entries = manifest.split_entries(split);
  if (entries.empty()) throw DataError("manifest split '" + split + "' is empty");
  EvalReport rep;
  for (auto& e : entries) {
    Waveform mix, clean;
    try {
      mix = load_wav((manifest.dir / e.mixture).string());
      clean = load_wav((manifest.dir / e.clean).string());
    } catch (const DataError& err) {
      std::cerr << "warning: skipping record " << e.speaker_id << ": " << err.what() << "\n";
      ++rep.warnings;
      continue;
    }
    std::vector<float> enhanced = enhance_wave(model, mix.samples);
    EvalRow row;
    row.id = e.speaker_id + "/" + e.noise_id;
    row.snr_in = e.snr_db;
    row.sisdr_noisy = si_sdr_metric(mix.samples, clean.samples);
    row.sisdr_enhanced = si_sdr_metric(enhanced, clean.samples);
    rep.rows.push_back(std::move(row));
  }
  if (rep.rows.empty()) throw DataError("no evaluable records in split '" + split + "'");

  std::vector<double> noisy, enh;
  for (auto& r : rep.rows) {
    noisy.push_back(r.sisdr_noisy);
    enh.push_back(r.sisdr_enhanced);
  }
  rep.mean_noisy = detail_eval::mean_of(noisy);
  rep.median_noisy = detail_eval::median(noisy);
  rep.std_noisy = detail_eval::std_of(noisy);
  rep.mean_enh = detail_eval::mean_of(enh);
  rep.median_enh = detail_eval::median(enh);
  rep.std_enh = detail_eval::std_of(enh);

  fs::create_directories(out_dir);
  {
    std::ofstream csv((fs::path(out_dir) / ("report_" + split + ".csv")).string());
    csv << std::setprecision(10);
    csv << "id,snr_in,sisdr_noisy,sisdr_enhanced,pesq,stoi\n";
    for (auto& r : rep.rows)
      csv << r.id << "," << r.snr_in << "," << r.sisdr_noisy << "," << r.sisdr_enhanced
          << ",,\n";
  }
  {
    std::ofstream tbl((fs::path(out_dir) / ("table_" + split + ".txt")).string());
    tbl << std::fixed << std::setprecision(2);
    tbl << std::setw(24) << "Model" << std::setw(8) << "PESQ" << std::setw(8) << "STOI"
        << std::setw(14) << "SI-SDR [dB]" << "\n";
    tbl << std::setw(24) << "noisy input" << std::setw(8) << "-" << std::setw(8) << "-"
        << std::setw(14) << rep.mean_noisy << "\n";
    tbl << std::setw(24) << "enhanced" << std::setw(8) << "-" << std::setw(8) << "-"
        << std::setw(14) << rep.mean_enh << "\n";
  }
  {
    std::ofstream sc((fs::path(out_dir) / ("scores_" + split + ".txt")).string());
    sc << std::setprecision(10);
    for (auto& r : rep.rows) sc << r.id << " " << r.sisdr_noisy << " " << r.sisdr_enhanced << "\n";
  }
  return rep;
}

}  // namespace cvu
