// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Single CLI for the complex-valued variational U-Net toolkit:
//   cvunet train      --config <file>
//   cvunet enhance    --checkpoint <f> --in <wav> --out <wav> [--config <f>]
//   cvunet evaluate   --checkpoint <f> --manifest <f> --split test --out-dir <d> [--config <f>]
//   cvunet synth-data --seed <n> --count <n> --out-dir <d>
//   cvunet gradcheck  [--module <name>]
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.

#include <CLI11.hpp>

#include "cvunet/gradcheck.hpp"
#include "cvunet/trainer.hpp"

namespace {

using namespace cvu;

// Model config for enhance/evaluate: defaults to the full-size architecture,
// overridable by a JSON file carrying either a bare model object or a full
// train config with a "model" section.
ModelConfig model_config_from_file(const std::string& path) {
  if (path.empty()) return ModelConfig::standard();
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  ModelConfig c = model_config_from_json(j.contains("model") ? j.at("model") : j);
  c.validate();
  return c;
}

int run_train(const std::string& config_path) {
  TrainConfig cfg = load_train_config(config_path);
  if (cfg.manifest.empty()) throw ConfigError("config is missing 'manifest'");
  TrainResult r = train(cfg);
  // persist the resolved config next to the checkpoint for later enhance/evaluate
  nlohmann::json j;
  j["model"] = model_config_to_json(cfg.model);
  std::ofstream((fs::path(cfg.out_dir) / "config.json").string()) << j.dump(2) << "\n";
  std::cout << "checkpoint: " << r.checkpoint_path << "\n"
            << "metrics:    " << r.metrics_path << "\n";
  return 0;
}

int run_enhance(const std::string& ckpt, const std::string& in_path,
                const std::string& out_path, const std::string& config_path) {
  ComplexUNet<float> model(model_config_from_file(config_path), /*seed=*/0);
  model.load_checkpoint(ckpt);
  enhance_file(model, in_path, out_path);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int run_evaluate(const std::string& ckpt, const std::string& manifest_path,
                 const std::string& split, const std::string& out_dir,
                 const std::string& config_path) {
  ComplexUNet<float> model(model_config_from_file(config_path), /*seed=*/0);
  model.load_checkpoint(ckpt);
  Manifest manifest = load_manifest(manifest_path);
  EvalReport rep = evaluate(model, manifest, split, out_dir);
  std::cout << "records: " << rep.rows.size() << " (skipped " << rep.warnings << ")\n"
            << "SI-SDR noisy    mean " << rep.mean_noisy << " dB, median " << rep.median_noisy
            << " dB\n"
            << "SI-SDR enhanced mean " << rep.mean_enh << " dB, median " << rep.median_enh
            << " dB\n"
            << "reports under " << out_dir << "\n";
  return 0;
}

int run_synth(uint64_t seed, int count, const std::string& out_dir) {
  SynthOptions opt;
  opt.seed = seed;
  opt.n_utterances = count;
  Manifest m = synth_corpus(opt, out_dir);
  std::cout << "wrote " << m.entries.size() << " utterances under " << out_dir << "\n";
  return 0;
}

// --- gradcheck subcommand ---------------------------------------------------
// Finite-difference verification of the reverse-mode gradients, per module.

template <typename T>
Tensor<T> gc_rnd(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data) v = static_cast<T>(d(rng));
  return t;
}

bool report(const std::string& name, double err, double tol) {
  const bool ok = err < tol;
  std::cout << (ok ? "  ok   " : "  FAIL ") << name << "  max rel err " << err << " (tol " << tol
            << ")\n";
  return ok;
}

bool gradcheck_tensor_core() {
  std::cout << "module tensor_core\n";
  std::mt19937_64 rng(1);
  bool ok = true;
  Tensor<double> x = gc_rnd<double>({1, 2, 6, 6}, rng);
  Tensor<double> k = gc_rnd<double>({3, 2, 3, 3}, rng);
  ConvGeom g;
  g.stride_h = g.stride_w = 2;
  g.pad_t = g.pad_b = g.pad_l = g.pad_r = 1;
  ok &= report("conv2d/input",
               grad_check([&](Var<double> v) {
                 return sum(square(conv2d(v, Var<double>::constant(k), g)));
               }, x),
               1e-4);
  ok &= report("conv2d/kernel",
               grad_check([&](Var<double> v) {
                 return sum(square(conv2d(Var<double>::constant(x), v, g)));
               }, k),
               1e-4);
  Tensor<double> kt = gc_rnd<double>({2, 3, 4, 4}, rng);
  Tensor<double> xt = gc_rnd<double>({1, 2, 3, 3}, rng);
  ok &= report("conv_transpose2d",
               grad_check([&](Var<double> v) {
                 return sum(square(conv_transpose2d(v, Var<double>::constant(kt), g)));
               }, xt),
               1e-4);
  Tensor<double> a = gc_rnd<double>({4, 5}, rng);
  ok &= report("matmul/softmax",
               grad_check([&](Var<double> v) {
                 return sum(square(softmax_rows(matmul(v, transpose2d(v)))));
               }, a),
               1e-4);
  return ok;
}

bool gradcheck_dsp() {
  std::cout << "module dsp\n";
  std::mt19937_64 rng(2);
  bool ok = true;
  auto plan = StftPlan<double>::make(4, 8);
  Tensor<double> w = gc_rnd<double>({plan.seg_len}, rng);
  ok &= report("istft(stft(x))",
               grad_check([&](Var<double> v) { return sum(square(istft(stft(v, plan), plan))); },
                          w, 1e-6),
               1e-4);
  Tensor<double> lm = gc_rnd<double>({10}, rng), ph = gc_rnd<double>({10}, rng);
  ok &= report("decode MaPh",
               grad_check([&](Var<double> v) {
                 auto d = decode_encoded(v, Var<double>::constant(ph), Encoding::MaPh);
                 return sum(add(square(d.re), square(d.im)));
               }, lm),
               1e-4);
  return ok;
}

bool gradcheck_complex_nn() {
  std::cout << "module complex_nn\n";
  std::mt19937_64 rng(3);
  bool ok = true;
  Tensor<double> re = gc_rnd<double>({2, 2, 5, 5}, rng), im = gc_rnd<double>({2, 2, 5, 5}, rng);
  auto cc = ComplexConv<double>::init(2, 3, 3, 3, ConvGeom{}, rng);
  ok &= report("ComplexConv",
               grad_check([&](Var<double> v) {
                 auto y = cc.forward({v, Var<double>::constant(im)});
                 return sum(add(square(y.re), square(y.im)));
               }, re),
               1e-4);
  ok &= report("ComplexBatchNorm(whiten)",
               grad_check([&](Var<double> v) {
                 auto bn = ComplexBatchNorm<double>::init(2, BnMode::whiten);
                 auto y = bn.forward({v, Var<double>::constant(im)}, true);
                 return sum(add(square(y.re), square(y.im)));
               }, re),
               1e-4);
  ok &= report("ComplexBatchNorm(split)",
               grad_check([&](Var<double> v) {
                 auto bn = ComplexBatchNorm<double>::init(2, BnMode::split);
                 auto y = bn.forward({v, Var<double>::constant(im)}, true);
                 return sum(add(square(y.re), square(y.im)));
               }, re),
               1e-4);
  Tensor<double> pos = gc_rnd<double>({1, 2, 4, 4}, rng, 0.2, 1.0);
  auto act = CPrelu<double>::init(2);
  ok &= report("cPReLU",
               grad_check([&](Var<double> v) {
                 auto y = act.forward({v, Var<double>::constant(pos)});
                 return sum(add(square(y.re), square(y.im)));
               }, pos),
               1e-4);
  auto ap = AttentionPlane<double>::init(8, rng);
  ap.gamma = Var<double>::leaf(Tensor<double>::full({1}, 0.5));
  Tensor<double> xa = gc_rnd<double>({1, 8, 3, 3}, rng);
  ok &= report("SelfAttention",
               grad_check([&](Var<double> v) { return sum(square(ap.forward(v))); }, xa),
               1e-4);
  return ok;
}

bool gradcheck_model() {
  std::cout << "module model (end-to-end reduced)\n";
  ModelConfig cfg = ModelConfig::reduced();
  ComplexUNet<double> m(cfg, 7);
  std::mt19937_64 in_rng(9);
  Tensor<double> re = gc_rnd<double>({1, 1, cfg.input_t, cfg.input_f}, in_rng);
  Tensor<double> im = gc_rnd<double>({1, 1, cfg.input_t, cfg.input_f}, in_rng);
  ComplexTensor<double> x{Var<double>::constant(re), Var<double>::constant(im)};
  auto eval_loss = [&]() {
    std::mt19937_64 rng(55);  // frozen reparameterization noise
    auto r = m.forward(x, true, rng);
    Var<double> loss = mean(add(square(r.output.re), square(r.output.im)));
    return add(loss, mean(add(add(square(r.latent->mu_re), square(r.latent->mu_im)),
                              add(square(r.latent->logvar_re), square(r.latent->logvar_im)))));
  };
  backward(eval_loss());
  std::mt19937_64 pick_rng(13);
  const double eps = 1e-5;
  double worst = 0;
  // sample coordinates across every parameter tensor
  for (auto& [name, p] : m.parameters()) {
    Tensor<double> analytic = p.grad();
    std::uniform_int_distribution<int64_t> pick(0, p.numel() - 1);
    const int64_t i = pick(pick_rng);
    Var<double>& pv = const_cast<Var<double>&>(p);
    const double orig = pv.value()[i];
    pv.value()[i] = orig + eps;
    const double fp = eval_loss().value()[0];
    pv.value()[i] = orig - eps;
    const double fm = eval_loss().value()[0];
    pv.value()[i] = orig;
    const double num = (fp - fm) / (2.0 * eps);
    const double rel = std::abs(analytic[i] - num) /
                       std::max({1.0, std::abs(analytic[i]), std::abs(num)});
    worst = std::max(worst, rel);
  }
  return report("end-to-end (one coordinate per parameter)", worst, 5e-3);
}

bool gradcheck_objective() {
  std::cout << "module objective\n";
  std::mt19937_64 rng(4);
  bool ok = true;
  Tensor<double> y = gc_rnd<double>({24}, rng);
  Tensor<double> yh = y;
  for (auto& v : yh.data) v += 0.1;
  ok &= report("si_sdr_db",
               grad_check([&](Var<double> v) { return si_sdr_db(v, y); }, yh, 1e-6), 1e-4);
  Tensor<double> mu = gc_rnd<double>({2, 4}, rng), lv = gc_rnd<double>({2, 4}, rng);
  ok &= report("kl_divergence",
               grad_check([&](Var<double> v) {
                 LatentGaussianPair<double> g{v, Var<double>::constant(lv),
                                              Var<double>::constant(mu),
                                              Var<double>::constant(lv)};
                 return kl_divergence(g);
               }, mu),
               1e-4);
  auto plan = StftPlan<double>::make(4, 8);
  Tensor<double> wave = gc_rnd<double>({1, plan.seg_len}, rng);
  Tensor<double> seg(Shape{plan.seg_len});
  std::copy(wave.data.begin(), wave.data.end(), seg.data.begin());
  auto spec = stft(Var<double>::constant(seg), plan);
  Tensor<double> t_re = spec.re.value().reshaped({1, 1, plan.frames, plan.bins});
  Tensor<double> t_im = spec.im.value().reshaped({1, 1, plan.frames, plan.bins});
  Tensor<double> o_re = t_re;
  for (auto& v : o_re.data) v += 0.05;
  std::mt19937_64 coords(5);
  ok &= report("composite_loss",
               grad_check_sampled([&](Var<double> v) {
                 ComplexTensor<double> out{v, Var<double>::constant(t_im)};
                 return composite_loss<double>(out, Encoding::ReIm, t_re, t_im, wave,
                                               std::nullopt, LossWeights{}, plan)
                     .total;
               }, o_re, 8, coords),
               1e-3);
  return ok;
}

int run_gradcheck(const std::string& module) {
  bool ok = true;
  bool matched = false;
  auto want = [&](const char* n) {
    const bool w = module.empty() || module == n;
    matched |= w;
    return w;
  };
  if (want("tensor_core")) ok &= gradcheck_tensor_core();
  if (want("dsp")) ok &= gradcheck_dsp();
  if (want("complex_nn")) ok &= gradcheck_complex_nn();
  if (want("model")) ok &= gradcheck_model();
  if (want("objective")) ok &= gradcheck_objective();
  if (!matched)
    throw ConfigError("unknown module '" + module +
                      "' (expected tensor_core, dsp, complex_nn, model, or objective)");
  if (!ok) throw NumericError("gradient check failed");
  std::cout << "all gradient checks passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"complex-valued variational U-Net speech enhancement toolkit"};
  app.require_subcommand(1);

  std::string config_path, ckpt, in_path, out_path, manifest_path, out_dir = ".";
  std::string split = "test", module;
  uint64_t seed = 1;
  int count = 20;

  auto* c_train = app.add_subcommand("train", "train a model from a JSON config");
  c_train->add_option("--config", config_path, "JSON training config")->required();

  auto* c_enh = app.add_subcommand("enhance", "denoise a WAV file with a checkpoint");
  c_enh->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  c_enh->add_option("--in", in_path, "input wav (mono, 16 kHz)")->required();
  c_enh->add_option("--out", out_path, "output wav")->required();
  c_enh->add_option("--config", config_path, "model config JSON (default: full-size)");

  auto* c_eval = app.add_subcommand("evaluate", "score a manifest split");
  c_eval->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  c_eval->add_option("--manifest", manifest_path, "JSONL manifest")->required();
  c_eval->add_option("--split", split, "split to score (default test)");
  c_eval->add_option("--out-dir", out_dir, "report directory")->required();
  c_eval->add_option("--config", config_path, "model config JSON (default: full-size)");

  auto* c_synth = app.add_subcommand("synth-data", "generate a synthetic corpus");
  c_synth->add_option("--seed", seed, "corpus seed");
  c_synth->add_option("--count", count, "number of utterances");
  c_synth->add_option("--out-dir", out_dir, "corpus directory")->required();

  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  c_gc->add_option("--module", module, "restrict to one module");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // usage errors -> 1, --help -> 0
  }

  try {
    if (c_train->parsed()) return run_train(config_path);
    if (c_enh->parsed()) return run_enhance(ckpt, in_path, out_path, config_path);
    if (c_eval->parsed()) return run_evaluate(ckpt, manifest_path, split, out_dir, config_path);
    if (c_synth->parsed()) return run_synth(seed, count, out_dir);
    if (c_gc->parsed()) return run_gradcheck(module);
  } catch (const cvu::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const cvu::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const cvu::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
