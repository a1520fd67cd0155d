#pragma once

// MENGLAN architecture assembly: dual-stream feature extractor (shared +
// position-specific convolutions), Feature Reactivation Module, Hybrid
// Multi-Head Attention, and a dense decoder, with ablation switches and a
// width multiplier for parameter-size scaling.
//
// Pipeline: input -> dual-stream -> FRM -> HMHA -> decoder.

#include <cstdint>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "menglan/layers.hpp"
#include "menglan/tensor.hpp"

namespace menglan {

struct ModelConfig {
  std::size_t input_channels = 16;
  std::size_t window_width = 64;
  double width_multiplier = 1.0;
  std::size_t stream_depth = 2;   // conv+pool stages per stream
  std::size_t kernel_size = 3;    // odd, same-padding
  std::size_t heads = 8;
  std::string activation = "relu";
  double dropout_rate = 0.2;
  bool use_frm = true;
  bool use_hmha = true;
  std::string target = "ethylene";  // ethylene -> conc_b, else conc_a
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
  std::uint64_t seed = 1;

  Activation act() const { return activation_from_string(activation); }

  /// Canonical flat key=value form; sorted by key so the hash is stable
  /// under field reordering.
  std::map<std::string, std::string> fields() const {
    std::map<std::string, std::string> f;
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    f["input_channels"] = std::to_string(input_channels);
    f["window_width"] = std::to_string(window_width);
    f["width_multiplier"] = num(width_multiplier);
    f["stream_depth"] = std::to_string(stream_depth);
    f["kernel_size"] = std::to_string(kernel_size);
    f["heads"] = std::to_string(heads);
    f["activation"] = activation;
    f["dropout_rate"] = num(dropout_rate);
    f["use_frm"] = use_frm ? "1" : "0";
    f["use_hmha"] = use_hmha ? "1" : "0";
    f["target"] = target;
    f["bn_momentum"] = num(bn_momentum);
    f["bn_epsilon"] = num(bn_epsilon);
    f["seed"] = std::to_string(seed);
    return f;
  }

  std::string serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : fields()) os << k << "=" << v << "\n";
    return os.str();
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : serialize()) {
      h ^= c;
      h *= 0x100000001B3ull;
    }
    return h;
  }

  static ModelConfig deserialize(const std::string& text);

  void set_field(const std::string& key, const std::string& value) {
    if (key == "input_channels") input_channels = std::stoul(value);
    else if (key == "window_width") window_width = std::stoul(value);
    else if (key == "width_multiplier") width_multiplier = std::stod(value);
    else if (key == "stream_depth") stream_depth = std::stoul(value);
    else if (key == "kernel_size") kernel_size = std::stoul(value);
    else if (key == "heads") heads = std::stoul(value);
    else if (key == "activation") activation = value;
    else if (key == "dropout_rate") dropout_rate = std::stod(value);
    else if (key == "use_frm") use_frm = value == "1" || value == "true";
    else if (key == "use_hmha") use_hmha = value == "1" || value == "true";
    else if (key == "target") target = value;
    else if (key == "bn_momentum") bn_momentum = std::stod(value);
    else if (key == "bn_epsilon") bn_epsilon = std::stod(value);
    else if (key == "seed") seed = std::stoull(value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
};

inline ModelConfig ModelConfig::deserialize(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("bad config line: '" + line + "'");
    cfg.set_field(line.substr(0, eq), line.substr(eq + 1));
  }
  return cfg;
}

/// Common surface for MENGLAN and the baselines: batched forward plus the
/// serialized tensor list (trainable parameters and BN running buffers, in
/// declaration order).
class RegressionModel {
 public:
  virtual ~RegressionModel() = default;
  /// x[N x ch x W] -> predictions [N].
  virtual Tensor forward(const Tensor& x, Mode mode, Rng& rng) = 0;
  virtual std::vector<Tensor> parameters() = 0;
  virtual const ModelConfig& config() const = 0;
  virtual std::string kind() const = 0;

  std::vector<Tensor> trainable() {
    std::vector<Tensor> out;
    for (auto& t : parameters())
      if (t.requires_grad()) out.push_back(t);
    return out;
  }
};

struct ParamCount {
  std::size_t count = 0;  // every serialized scalar (incl. BN running stats)
  std::size_t bytes = 0;  // count * 8 for the 64-bit checkpoint
};

inline ParamCount count_params(RegressionModel& model) {
  ParamCount pc;
  for (auto& t : model.parameters()) pc.count += t.size();
  pc.bytes = pc.count * 8;
  return pc;
}

// One conv+pool stage of a stream; pooling halves the time axis.
constexpr std::size_t kPoolWindow = 2;
constexpr std::size_t kPoolStride = 2;

struct FrmParams {
  SharedConv1dParams conv1;
  BatchNormState bn1;
  SharedConv1dParams conv2;
  BatchNormState bn2;
};

class MenglanModel : public RegressionModel {
 public:
  MenglanModel(ModelConfig cfg, Rng rng) : cfg_(std::move(cfg)) {
    validate(cfg_);
    const std::size_t k = cfg_.kernel_size;
    const std::size_t pad = (k - 1) / 2;  // same padding, stride 1
    Rng init = rng.fork("init");

    std::size_t w = cfg_.window_width;
    std::size_t gch = cfg_.input_channels;
    std::size_t lch = cfg_.input_channels;
    for (std::size_t stage = 0; stage < cfg_.stream_depth; ++stage) {
      if (w < kPoolWindow)
        throw ConfigError("window too small for stream stage " + std::to_string(stage) +
                          ": width " + std::to_string(w) + " < pool window");
      std::size_t out_ch = stage_channels(stage);
      global_convs_.push_back(make_shared_conv(out_ch, gch, k, 1, pad, init));
      local_banks_.push_back(make_local_bank(w, out_ch, lch, k, 1, pad, init));
      gch = lch = out_ch;
      w = (w - kPoolWindow) / kPoolStride + 1;
    }
    fused_channels_ = 2 * gch;
    fused_width_ = w;
    if (cfg_.use_hmha && fused_channels_ % cfg_.heads != 0)
      throw ConfigError("fused channel count " + std::to_string(fused_channels_) +
                        " not divisible by " + std::to_string(cfg_.heads) + " heads");

    frm_.conv1 = make_shared_conv(fused_channels_, fused_channels_, k, 1, pad, init);
    frm_.bn1 = make_batchnorm(fused_channels_, cfg_.bn_momentum, cfg_.bn_epsilon);
    frm_.conv2 = make_shared_conv(fused_channels_, fused_channels_, k, 1, pad, init);
    frm_.bn2 = make_batchnorm(fused_channels_, cfg_.bn_momentum, cfg_.bn_epsilon);

    std::size_t att_heads = cfg_.use_hmha ? cfg_.heads : 1;
    attention_ = make_attention(fused_channels_, att_heads, init);
    hmha_local_ = make_local_bank(fused_width_, fused_channels_, fused_channels_, k, 1, pad, init);
    hmha_fuse_ = make_shared_conv(fused_channels_, 2 * fused_channels_, 1, 1, 0, init);

    std::size_t flat = fused_channels_ * fused_width_;
    decoder1_ = make_dense(flat, fused_channels_, init);
    decoder2_ = make_dense(fused_channels_, 1, init);
  }

  /// Both streams on x[N x in_ch x W], concatenated on the channel axis.
  Tensor dual_stream_forward(const Tensor& x) {
    Tensor g = x, l = x;
    Activation act = cfg_.act();
    for (std::size_t stage = 0; stage < cfg_.stream_depth; ++stage) {
      g = maxpool1d_batched(activation(act, conv1d_shared_batched(g, global_convs_[stage])),
                            kPoolWindow, kPoolStride);
      l = maxpool1d_batched(activation(act, conv1d_local_batched(l, local_banks_[stage])),
                            kPoolWindow, kPoolStride);
    }
    return concat(g, l, 1);
  }

  /// rFeature = BN2(conv2(BN1(conv1(F)))) + F.
  Tensor frm_forward(const Tensor& f, Mode mode) {
    Tensor o1 = conv1d_shared_batched(f, frm_.conv1);
    Tensor b1 = batchnorm(o1, frm_.bn1, mode);
    Tensor o2 = conv1d_shared_batched(b1, frm_.conv2);
    Tensor b2 = batchnorm(o2, frm_.bn2, mode);
    return add(b2, f);
  }

  /// Attention branch over the time axis plus a local-convolution branch,
  /// concatenated on channels and fused back by a 1x1 convolution. With
  /// use_hmha=false this is the identity.
  Tensor hmha_forward(const Tensor& r, Mode) {
    if (!cfg_.use_hmha) return r;
    Tensor att = transpose_last2(multi_head_attention_batched(transpose_last2(r), attention_));
    Tensor loc = conv1d_local_batched(r, hmha_local_);
    return conv1d_shared_batched(concat(att, loc, 1), hmha_fuse_);
  }

  Tensor decoder_forward(const Tensor& h, Mode mode, Rng& rng) {
    const std::size_t n = h.dim(0);
    Tensor flat = reshape(h, Shape{n, fused_channels_ * fused_width_});
    Tensor d1 = activation(cfg_.act(), dense(flat, decoder1_));
    Tensor d2 = dropout(d1, cfg_.dropout_rate, rng, mode);
    return reshape(dense(d2, decoder2_), Shape{n});
  }

  Tensor forward(const Tensor& x, Mode mode, Rng& rng) override {
    if (x.rank() != 3 || x.dim(1) != cfg_.input_channels || x.dim(2) != cfg_.window_width)
      throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match config " +
                           std::to_string(cfg_.input_channels) + "x" +
                           std::to_string(cfg_.window_width));
    Tensor f = dual_stream_forward(x);
    Tensor r = cfg_.use_frm ? frm_forward(f, mode) : f;
    Tensor h = hmha_forward(r, mode);
    return decoder_forward(h, mode, rng);
  }

  /// Single-window prediction; inference mode is deterministic.
  double predict(const Tensor& window, Mode mode, Rng& rng) {
    if (window.rank() != 2) throw DimensionError("predict: [ch x W] window required");
    Tensor x = reshape(window.detach_copy(), Shape{1, window.dim(0), window.dim(1)});
    return forward(x, mode, rng)[0];
  }

  std::vector<Tensor> parameters() override {
    std::vector<Tensor> p;
    for (auto& c : global_convs_) {
      p.push_back(c.kernels);
      p.push_back(c.bias);
    }
    for (auto& b : local_banks_) {
      p.push_back(b.kernels);
      p.push_back(b.bias);
    }
    for (auto* bn : {&frm_.bn1, &frm_.bn2}) {
      p.push_back(bn->gamma);
      p.push_back(bn->beta);
      p.push_back(bn->running_mean);
      p.push_back(bn->running_var);
    }
    p.push_back(frm_.conv1.kernels);
    p.push_back(frm_.conv1.bias);
    p.push_back(frm_.conv2.kernels);
    p.push_back(frm_.conv2.bias);
    p.push_back(attention_.wq);
    p.push_back(attention_.wk);
    p.push_back(attention_.wv);
    p.push_back(attention_.wo);
    p.push_back(hmha_local_.kernels);
    p.push_back(hmha_local_.bias);
    p.push_back(hmha_fuse_.kernels);
    p.push_back(hmha_fuse_.bias);
    p.push_back(decoder1_.weight);
    p.push_back(decoder1_.bias);
    p.push_back(decoder2_.weight);
    p.push_back(decoder2_.bias);
    return p;
  }

  const ModelConfig& config() const override { return cfg_; }
  std::string kind() const override { return "menglan"; }

  std::size_t fused_channels() const { return fused_channels_; }
  std::size_t fused_width() const { return fused_width_; }
  FrmParams& frm() { return frm_; }
  const std::vector<SharedConv1dParams>& global_convs() const { return global_convs_; }
  const std::vector<LocalKernelBank>& local_banks() const { return local_banks_; }

  std::vector<Tensor> frm_trainable() {
    return {frm_.conv1.kernels, frm_.conv1.bias, frm_.bn1.gamma, frm_.bn1.beta,
            frm_.conv2.kernels, frm_.conv2.bias, frm_.bn2.gamma, frm_.bn2.beta};
  }

 private:
  static void validate(const ModelConfig& cfg) {
    if (cfg.kernel_size % 2 == 0) throw ConfigError("kernel_size must be odd (same padding)");
    if (cfg.width_multiplier <= 0.0) throw ConfigError("width_multiplier must be > 0");
    if (cfg.heads < 1) throw ConfigError("heads must be >= 1");
    if (cfg.stream_depth < 1) throw ConfigError("stream_depth must be >= 1");
    activation_from_string(cfg.activation);  // validates the tag
  }

  /// Channels at stream stage i: 16 * 2^i scaled by the width multiplier,
  /// rounded up to a multiple of the head count so HMHA divisibility holds
  /// by construction.
  std::size_t stage_channels(std::size_t stage) const {
    double raw = 16.0 * static_cast<double>(std::size_t{1} << stage) * cfg_.width_multiplier;
    std::size_t h = cfg_.heads;
    auto ch = static_cast<std::size_t>(raw + 0.5);
    if (ch < 1) ch = 1;
    std::size_t rounded = ((ch + h - 1) / h) * h;
    return rounded;
  }

  ModelConfig cfg_;
  std::vector<SharedConv1dParams> global_convs_;
  std::vector<LocalKernelBank> local_banks_;
  std::size_t fused_channels_ = 0;
  std::size_t fused_width_ = 0;
  FrmParams frm_;
  AttentionHeadParams attention_;
  LocalKernelBank hmha_local_;
  SharedConv1dParams hmha_fuse_;
  DenseParams decoder1_;
  DenseParams decoder2_;
};

inline std::unique_ptr<MenglanModel> build_model(const ModelConfig& cfg, Rng rng) {
  return std::make_unique<MenglanModel>(cfg, rng);
}

// ---- baselines ---------------------------------------------------------------

/// flatten -> dense -> activation -> dense -> scalar.
class AnnBaseline : public RegressionModel {
 public:
  AnnBaseline(ModelConfig cfg, Rng rng) : cfg_(std::move(cfg)) {
    Rng init = rng.fork("init");
    std::size_t flat = cfg_.input_channels * cfg_.window_width;
    std::size_t hidden = std::max<std::size_t>(
        8, static_cast<std::size_t>(64 * cfg_.width_multiplier + 0.5));
    d1_ = make_dense(flat, hidden, init);
    d2_ = make_dense(hidden, 1, init);
  }

  Tensor forward(const Tensor& x, Mode, Rng&) override {
    const std::size_t n = x.dim(0);
    Tensor flat = reshape(x, Shape{n, x.dim(1) * x.dim(2)});
    Tensor h = activation(cfg_.act(), dense(flat, d1_));
    return reshape(dense(h, d2_), Shape{n});
  }

  std::vector<Tensor> parameters() override {
    return {d1_.weight, d1_.bias, d2_.weight, d2_.bias};
  }
  const ModelConfig& config() const override { return cfg_; }
  std::string kind() const override { return "ann"; }

 private:
  ModelConfig cfg_;
  DenseParams d1_, d2_;
};

/// shared conv -> activation -> maxpool -> flatten -> dense -> scalar.
class CnnBaseline : public RegressionModel {
 public:
  CnnBaseline(ModelConfig cfg, Rng rng) : cfg_(std::move(cfg)) {
    Rng init = rng.fork("init");
    if (cfg_.kernel_size % 2 == 0) throw ConfigError("kernel_size must be odd");
    std::size_t out_ch = std::max<std::size_t>(
        4, static_cast<std::size_t>(16 * cfg_.width_multiplier + 0.5));
    conv_ = make_shared_conv(out_ch, cfg_.input_channels, cfg_.kernel_size, 1,
                             (cfg_.kernel_size - 1) / 2, init);
    pooled_w_ = (cfg_.window_width - kPoolWindow) / kPoolStride + 1;
    head_ = make_dense(out_ch * pooled_w_, 1, init);
  }

  Tensor forward(const Tensor& x, Mode, Rng&) override {
    const std::size_t n = x.dim(0);
    Tensor h = maxpool1d_batched(activation(cfg_.act(), conv1d_shared_batched(x, conv_)),
                                 kPoolWindow, kPoolStride);
    Tensor flat = reshape(h, Shape{n, h.dim(1) * h.dim(2)});
    return reshape(dense(flat, head_), Shape{n});
  }

  std::vector<Tensor> parameters() override {
    return {conv_.kernels, conv_.bias, head_.weight, head_.bias};
  }
  const ModelConfig& config() const override { return cfg_; }
  std::string kind() const override { return "cnn"; }

 private:
  ModelConfig cfg_;
  SharedConv1dParams conv_;
  std::size_t pooled_w_ = 0;
  DenseParams head_;
};

inline std::unique_ptr<RegressionModel> build_any_model(const std::string& kind,
                                                        const ModelConfig& cfg, Rng rng) {
  if (kind == "menglan") return std::make_unique<MenglanModel>(cfg, rng);
  if (kind == "ann") return std::make_unique<AnnBaseline>(cfg, rng);
  if (kind == "cnn") return std::make_unique<CnnBaseline>(cfg, rng);
  throw ConfigError("unknown model kind '" + kind + "'");
}

inline std::unique_ptr<RegressionModel> build_baseline(const std::string& tag,
                                                       const ModelConfig& cfg, Rng rng) {
  if (tag != "ann" && tag != "cnn") throw ConfigError("unknown baseline tag '" + tag + "'");
  return build_any_model(tag, cfg, rng);
}

/// Searches the width multiplier whose serialized parameter size lands
/// nearest a byte target (channel rounding makes the curve a step
/// function; parameter count grows monotonically in the multiplier).
inline double fit_width_multiplier(ModelConfig cfg, std::size_t target_bytes) {
  auto bytes_at = [&cfg](double m) {
    ModelConfig c = cfg;
    c.width_multiplier = m;
    MenglanModel model(c, Rng(1));
    return count_params(model).bytes;
  };
  double lo = 0.05, hi = 1.0;
  while (bytes_at(hi) < target_bytes) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1024.0) throw ConfigError("fit_width_multiplier: target out of range");
  }
  for (int it = 0; it < 48; ++it) {
    double mid = 0.5 * (lo + hi);
    if (bytes_at(mid) < target_bytes) lo = mid;
    else hi = mid;
  }
  return hi;
}

}  // namespace menglan
