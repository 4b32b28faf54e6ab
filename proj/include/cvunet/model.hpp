// Copyright 2026 the cvunet authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <fstream>
#include <optional>

#include "cvunet/complex_nn.hpp"
#include "cvunet/dsp.hpp"

namespace cvu {

enum class DilationAxes { both, time };

inline const char* dilation_axes_name(DilationAxes d) {
  return d == DilationAxes::both ? "both" : "time";
}
inline DilationAxes dilation_axes_from_name(const std::string& s) {
  if (s == "both") return DilationAxes::both;
  if (s == "time") return DilationAxes::time;
  throw ConfigError("unknown dilation_axes '" + s + "'");
}

struct ModelConfig {
  int64_t levels = 7;
  std::vector<int64_t> channels{64, 128, 256, 512, 512, 512, 512};
  std::vector<int64_t> dilations{16, 8, 4, 2, 1, 1, 1};
  int64_t input_t = 256, input_f = 256;  // input is 2 x T x F
  int64_t latent_dim = 256;
  bool variational = true;
  bool self_attention = true;
  Encoding encoding = Encoding::ReIm;
  BnMode bn_mode = BnMode::whiten;
  DilationAxes dilation_axes = DilationAxes::both;

  static ModelConfig standard() { return {}; }

  /// Desk-scale configuration: 4 levels, 2x64x64 input, latent 64.
  static ModelConfig reduced() {
    ModelConfig c;
    c.levels = 4;
    c.channels = {8, 16, 32, 64};
    c.dilations = {2, 1, 1, 1};
    c.input_t = 64;
    c.input_f = 64;
    c.latent_dim = 64;
    c.self_attention = false;
    return c;
  }

  void validate() const {
    if (levels < 1) throw ConfigError("levels must be >= 1");
    if (static_cast<int64_t>(channels.size()) != levels ||
        static_cast<int64_t>(dilations.size()) != levels)
      throw ConfigError("channels/dilations lists must have `levels` entries");
    const int64_t div = int64_t(1) << levels;
    if (input_t % div != 0 || input_f % div != 0)
      throw ConfigError("input spatial size must be divisible by 2^levels");
    if (channels.back() % 2 != 0)
      throw ConfigError("deepest channel count must be even (bottleneck halves it)");
    if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    for (int64_t c : channels)
      if (c < 1) throw ConfigError("channel counts must be >= 1");
    for (int64_t d : dilations)
      if (d < 1) throw ConfigError("dilations must be >= 1");
  }

  /// Canonical textual form; checkpoints store its FNV-1a digest.
  std::string canonical_string() const {
    std::ostringstream os;
    os << "levels=" << levels << ";channels=";
    for (auto c : channels) os << c << ",";
    os << ";dilations=";
    for (auto d : dilations) os << d << ",";
    os << ";input=" << input_t << "x" << input_f << ";latent=" << latent_dim
       << ";variational=" << variational << ";sa=" << self_attention
       << ";encoding=" << encoding_name(encoding) << ";bn=" << bn_mode_name(bn_mode)
       << ";dilaxes=" << dilation_axes_name(dilation_axes);
    return os.str();
  }

  uint64_t digest() const {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : canonical_string()) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }
};

/// Posterior parameters of the two diagonal Gaussians, per batch row.
template <typename T>
struct LatentGaussianPair {
  Var<T> mu_re, logvar_re, mu_im, logvar_im;  // each [N, latent_dim]
};

constexpr double kLogvarMin = -20.0, kLogvarMax = 10.0;

// ---------------------------------------------------------------------------
// The seven-level complex U-Net with self-attention laterals and the
// dual-Gaussian variational bottleneck. Ablation flags in ModelConfig select
// the SA-CVU / CVU / CU variants.
// ---------------------------------------------------------------------------

template <typename T>
class ComplexUNet {
 public:
  struct EncBlock {
    ComplexConv<T> conv;
    ComplexBatchNorm<T> bn;
    CPrelu<T> act;
    std::optional<ComplexSelfAttention<T>> sa;
  };
  struct DecBlock {
    ComplexConvTranspose<T> conv;
    std::optional<ComplexBatchNorm<T>> bn;
    std::optional<CPrelu<T>> act;
  };
  struct Bottleneck {
    ComplexConv<T> conv_in;   // 1x1, Cb -> Cb/2
    CPrelu<T> act_in;
    // per-plane linear heads, flat = (Cb/2) * sH * sW
    Var<T> w_mu_re, b_mu_re, w_lv_re, b_lv_re;      // [latent, flat], [latent]
    Var<T> w_mu_im, b_mu_im, w_lv_im, b_lv_im;
    Var<T> w_det_re, b_det_re, w_det_im, b_det_im;  // deterministic variant
    Var<T> w_out_re, b_out_re, w_out_im, b_out_im;  // [flat, latent], [flat]
    CPrelu<T> act_out;
    ComplexConv<T> conv_out;  // 1x1, Cb/2 -> Cb
  };

  ComplexUNet(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    build(rng);
    register_all();
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamList<T>& parameters() const { return params_; }
  const BufferList<T>& buffers() const { return buffers_; }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (auto& [name, p] : params_) n += p.numel();
    return n;
  }

  /// Encoder sweep. Returns the deepest activation plus the (optionally
  /// SA-processed) lateral at every level, shallow to deep.
  std::pair<ComplexTensor<T>, std::vector<ComplexTensor<T>>> encode_path(
      const ComplexTensor<T>& input, bool training) {
    check_input(input);
    std::vector<ComplexTensor<T>> laterals;
    laterals.reserve(enc_.size());
    ComplexTensor<T> h = input;
    for (auto& blk : enc_) {
      h = blk.act.forward(blk.bn.forward(blk.conv.forward(h), training));
      // SA output feeds the lateral path only; the next level sees the raw
      // block output.
      laterals.push_back(blk.sa ? blk.sa->forward(h) : h);
    }
    return {h, std::move(laterals)};
  }

  /// Latent bottleneck. Sampling only when variational and training; inference
  /// uses the posterior mean.
  std::pair<ComplexTensor<T>, std::optional<LatentGaussianPair<T>>> bottleneck(
      const ComplexTensor<T>& deep, bool training, std::mt19937_64& rng) {
    ComplexTensor<T> h = bn_.act_in.forward(bn_.conv_in.forward(deep));
    const Shape& s = h.shape();  // [N, Cb/2, sH, sW]
    const int64_t N = s[0];
    Var<T> flat_re = reshape(h.re, Shape{N, flat_});
    Var<T> flat_im = reshape(h.im, Shape{N, flat_});

    Var<T> z_re, z_im;
    std::optional<LatentGaussianPair<T>> latent;
    if (cfg_.variational) {
      LatentGaussianPair<T> g;
      g.mu_re = linear(flat_re, bn_.w_mu_re, bn_.b_mu_re);
      g.mu_im = linear(flat_im, bn_.w_mu_im, bn_.b_mu_im);
      g.logvar_re = clamp(linear(flat_re, bn_.w_lv_re, bn_.b_lv_re),
                          static_cast<T>(kLogvarMin), static_cast<T>(kLogvarMax));
      g.logvar_im = clamp(linear(flat_im, bn_.w_lv_im, bn_.b_lv_im),
                          static_cast<T>(kLogvarMin), static_cast<T>(kLogvarMax));
      if (training) {
        // reparameterization: z = mu + exp(logvar/2) * eps
        Tensor<T> eps_re(Shape{N, cfg_.latent_dim}), eps_im(eps_re.shape);
        normal_(eps_re, 0.0, 1.0, rng);
        normal_(eps_im, 0.0, 1.0, rng);
        z_re = add(g.mu_re, mul(exp(mul(g.logvar_re, Var<T>::scalar(T(0.5)))),
                                Var<T>::constant(eps_re)));
        z_im = add(g.mu_im, mul(exp(mul(g.logvar_im, Var<T>::scalar(T(0.5)))),
                                Var<T>::constant(eps_im)));
      } else {
        z_re = g.mu_re;
        z_im = g.mu_im;
      }
      latent = std::move(g);
    } else {
      z_re = linear(flat_re, bn_.w_det_re, bn_.b_det_re);
      z_im = linear(flat_im, bn_.w_det_im, bn_.b_det_im);
    }

    Var<T> up_re = reshape(linear(z_re, bn_.w_out_re, bn_.b_out_re),
                           Shape{N, s[1], s[2], s[3]});
    Var<T> up_im = reshape(linear(z_im, bn_.w_out_im, bn_.b_out_im),
                           Shape{N, s[1], s[2], s[3]});
    ComplexTensor<T> out = bn_.act_out.forward({up_re, up_im});
    out = bn_.conv_out.forward(out);
    return {std::move(out), std::move(latent)};
  }

  /// Decoder sweep, deep to shallow; laterals are channel-concatenated.
  ComplexTensor<T> decode_path(const ComplexTensor<T>& feat,
                               const std::vector<ComplexTensor<T>>& laterals,
                               bool training) {
    if (static_cast<int64_t>(laterals.size()) != cfg_.levels)
      throw ConfigError("decode_path: expected " + std::to_string(cfg_.levels) + " laterals");
    ComplexTensor<T> h = feat;
    for (int64_t i = cfg_.levels - 1; i >= 0; --i) {
      const ComplexTensor<T>& lat = laterals[static_cast<size_t>(i)];
      if (lat.shape() != h.shape())
        throw ConfigError("decode_path: lateral shape " + shape_str(lat.shape()) +
                          " does not match features " + shape_str(h.shape()));
      ComplexTensor<T> cat{concat<T>({lat.re, h.re}, 1), concat<T>({lat.im, h.im}, 1)};
      DecBlock& blk = dec_[static_cast<size_t>(cfg_.levels - 1 - i)];
      h = blk.conv.forward(cat);
      if (blk.bn) h = blk.bn->forward(h, training);
      if (blk.act) h = blk.act->forward(h);
    }
    return h;
  }

  struct ForwardResult {
    ComplexTensor<T> output;  // planes [N,1,T,F] in the configured encoding
    std::optional<LatentGaussianPair<T>> latent;
  };

  ForwardResult forward(const ComplexTensor<T>& input, bool training, std::mt19937_64& rng) {
    auto [deep, laterals] = encode_path(input, training);
    auto [feat, latent] = bottleneck(deep, training, rng);
    ComplexTensor<T> out = decode_path(feat, laterals, training);
    return {std::move(out), std::move(latent)};
  }

  // --- checkpoint format -----------------------------------------------------
  // "CVUN" | u32 version | u64 config digest | u64 entry count |
  // per entry: u32 name length, name bytes, u32 rank, u64 dims..., f32 payload.
  // Little-endian throughout; parameters first, then BN running stats.

  void save_checkpoint(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint: " + path);
    f.write("CVUN", 4);
    write_u32(f, 1);
    write_u64(f, cfg_.digest());
    write_u64(f, static_cast<uint64_t>(params_.size() + buffers_.size()));
    for (auto& [name, p] : params_) write_entry(f, name, p.value());
    for (auto& [name, b] : buffers_) write_entry(f, name, *b);
    if (!f) throw DataError("checkpoint write failed: " + path);
  }

  void load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "CVUN") throw DataError("bad checkpoint magic: " + path);
    const uint32_t version = read_u32(f);
    if (version != 1) throw DataError("unsupported checkpoint version");
    const uint64_t digest = read_u64(f);
    if (digest != cfg_.digest())
      throw ConfigError("checkpoint config digest mismatch (model built with different config)");
    const uint64_t count = read_u64(f);
    if (count != params_.size() + buffers_.size()) throw DataError("checkpoint entry count mismatch");
    for (auto& [name, p] : params_) read_entry(f, name, p.value());
    for (auto& [name, b] : buffers_) read_entry(f, name, *b);
    if (!f) throw DataError("checkpoint truncated: " + path);
  }

 private:
  ModelConfig cfg_;
  std::vector<EncBlock> enc_;
  Bottleneck bn_;
  std::vector<DecBlock> dec_;
  int64_t flat_ = 0;
  ParamList<T> params_;
  BufferList<T> buffers_;

  void check_input(const ComplexTensor<T>& x) const {
    const Shape& s = x.re.shape();
    if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.input_t || s[3] != cfg_.input_f)
      throw ConfigError("model input must be [N,1," + std::to_string(cfg_.input_t) + "," +
                        std::to_string(cfg_.input_f) + "], got " + shape_str(s));
  }

  ConvGeom encoder_geom(int64_t dilation) const {
    ConvGeom g;
    g.stride_h = g.stride_w = 2;
    g.dil_h = dilation;
    g.dil_w = (cfg_.dilation_axes == DilationAxes::both) ? dilation : 1;
    auto [pt, pb] = halving_pad(g.dil_h);
    auto [pl, pr] = halving_pad(g.dil_w);
    g.pad_t = pt;
    g.pad_b = pb;
    g.pad_l = pl;
    g.pad_r = pr;
    return g;
  }

  void build(std::mt19937_64& rng) {
    const int64_t L = cfg_.levels;
    for (int64_t i = 0; i < L; ++i) {
      const int64_t cin = (i == 0) ? 1 : cfg_.channels[static_cast<size_t>(i - 1)];
      const int64_t cout = cfg_.channels[static_cast<size_t>(i)];
      EncBlock blk{
          ComplexConv<T>::init(cin, cout, 4, 4, encoder_geom(cfg_.dilations[static_cast<size_t>(i)]), rng),
          ComplexBatchNorm<T>::init(cout, cfg_.bn_mode), CPrelu<T>::init(cout), std::nullopt};
      if (cfg_.self_attention) blk.sa = ComplexSelfAttention<T>::init(cout, rng);
      enc_.push_back(std::move(blk));
    }

    const int64_t cb = cfg_.channels.back();
    const int64_t cb2 = cb / 2;
    const int64_t sh = cfg_.input_t >> L, sw = cfg_.input_f >> L;
    flat_ = cb2 * sh * sw;
    const int64_t lat = cfg_.latent_dim;
    ConvGeom one;  // 1x1, stride 1, no pad
    bn_.conv_in = ComplexConv<T>::init(cb, cb2, 1, 1, one, rng);
    bn_.act_in = CPrelu<T>::init(cb2);
    auto mk_lin = [&](int64_t dout, int64_t din) {
      Tensor<T> w(Shape{dout, din});
      he_uniform_(w, din, rng);
      return Var<T>::leaf(std::move(w));
    };
    auto mk_bias = [&](int64_t d) { return Var<T>::leaf(Tensor<T>::zeros(Shape{d})); };
    bn_.w_mu_re = mk_lin(lat, flat_); bn_.b_mu_re = mk_bias(lat);
    bn_.w_lv_re = mk_lin(lat, flat_); bn_.b_lv_re = mk_bias(lat);
    bn_.w_mu_im = mk_lin(lat, flat_); bn_.b_mu_im = mk_bias(lat);
    bn_.w_lv_im = mk_lin(lat, flat_); bn_.b_lv_im = mk_bias(lat);
    bn_.w_det_re = mk_lin(lat, flat_); bn_.b_det_re = mk_bias(lat);
    bn_.w_det_im = mk_lin(lat, flat_); bn_.b_det_im = mk_bias(lat);
    bn_.w_out_re = mk_lin(flat_, lat); bn_.b_out_re = mk_bias(flat_);
    bn_.w_out_im = mk_lin(flat_, lat); bn_.b_out_im = mk_bias(flat_);
    bn_.act_out = CPrelu<T>::init(cb2);
    bn_.conv_out = ComplexConv<T>::init(cb2, cb, 1, 1, one, rng);

    for (int64_t i = L - 1; i >= 0; --i) {
      const int64_t cin = 2 * cfg_.channels[static_cast<size_t>(i)];  // lateral concat
      const int64_t cout = (i > 0) ? cfg_.channels[static_cast<size_t>(i - 1)] : 1;
      ConvGeom g;
      g.stride_h = g.stride_w = 2;
      g.pad_t = g.pad_b = g.pad_l = g.pad_r = 1;
      DecBlock blk{ComplexConvTranspose<T>::init(cin, cout, 4, 4, g, rng), std::nullopt,
                   std::nullopt};
      if (i > 0) {
        blk.bn = ComplexBatchNorm<T>::init(cout, cfg_.bn_mode);
        blk.act = CPrelu<T>::init(cout);
      }
      dec_.push_back(std::move(blk));
    }
  }

  void register_all() {
    for (size_t i = 0; i < enc_.size(); ++i) {
      const std::string p = "encoder." + std::to_string(i);
      enc_[i].conv.params(params_, p + ".conv");
      enc_[i].bn.params(params_, p + ".bn");
      enc_[i].act.params(params_, p + ".act");
      if (enc_[i].sa) enc_[i].sa->params(params_, p + ".sa");
      enc_[i].bn.buffers(buffers_, p + ".bn");
    }
    bn_.conv_in.params(params_, "bottleneck.conv_in");
    bn_.act_in.params(params_, "bottleneck.act_in");
    auto reg = [&](const char* n, Var<T>& v) { params_.push_back({std::string("bottleneck.") + n, v}); };
    if (cfg_.variational) {
      reg("w_mu_re", bn_.w_mu_re); reg("b_mu_re", bn_.b_mu_re);
      reg("w_lv_re", bn_.w_lv_re); reg("b_lv_re", bn_.b_lv_re);
      reg("w_mu_im", bn_.w_mu_im); reg("b_mu_im", bn_.b_mu_im);
      reg("w_lv_im", bn_.w_lv_im); reg("b_lv_im", bn_.b_lv_im);
    } else {
      reg("w_det_re", bn_.w_det_re); reg("b_det_re", bn_.b_det_re);
      reg("w_det_im", bn_.w_det_im); reg("b_det_im", bn_.b_det_im);
    }
    reg("w_out_re", bn_.w_out_re); reg("b_out_re", bn_.b_out_re);
    reg("w_out_im", bn_.w_out_im); reg("b_out_im", bn_.b_out_im);
    bn_.act_out.params(params_, "bottleneck.act_out");
    bn_.conv_out.params(params_, "bottleneck.conv_out");
    for (size_t j = 0; j < dec_.size(); ++j) {
      const std::string p = "decoder." + std::to_string(j);
      dec_[j].conv.params(params_, p + ".conv");
      if (dec_[j].bn) {
        dec_[j].bn->params(params_, p + ".bn");
        dec_[j].bn->buffers(buffers_, p + ".bn");
      }
      if (dec_[j].act) dec_[j].act->params(params_, p + ".act");
    }
  }

  // little-endian binary helpers (host assumed little-endian)
  static void write_u32(std::ostream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
  static void write_u64(std::ostream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
  static uint32_t read_u32(std::istream& f) { uint32_t v = 0; f.read(reinterpret_cast<char*>(&v), 4); return v; }
  static uint64_t read_u64(std::istream& f) { uint64_t v = 0; f.read(reinterpret_cast<char*>(&v), 8); return v; }

  static void write_entry(std::ostream& f, const std::string& name, const Tensor<T>& t) {
    write_u32(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(f, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) write_u64(f, static_cast<uint64_t>(d));
    for (T v : t.data) {
      const float x = static_cast<float>(v);
      f.write(reinterpret_cast<const char*>(&x), 4);
    }
  }

  static void read_entry(std::istream& f, const std::string& expect_name, Tensor<T>& t) {
    const uint32_t nl = read_u32(f);
    std::string name(nl, '\0');
    f.read(name.data(), nl);
    if (name != expect_name)
      throw DataError("checkpoint entry '" + name + "' does not match expected '" + expect_name + "'");
    const uint32_t rank = read_u32(f);
    Shape s(rank);
    for (auto& d : s) d = static_cast<int64_t>(read_u64(f));
    if (s != t.shape) throw DataError("checkpoint shape mismatch for " + expect_name);
    for (auto& v : t.data) {
      float x = 0;
      f.read(reinterpret_cast<char*>(&x), 4);
      v = static_cast<T>(x);
    }
  }
};

}  // namespace cvu
