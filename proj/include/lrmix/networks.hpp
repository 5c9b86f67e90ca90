#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lrmix/archive.hpp"
#include "lrmix/config.hpp"
#include "lrmix/layers.hpp"

namespace lrmix {

// ---------------------------------------------------------------------------
// Configurations

struct EncoderConfig {
  std::size_t in_channels = 3;
  std::size_t base_channels = 8;
  std::size_t num_downsamples = 2;
  std::size_t latent_channels = 40;
  std::size_t stem_kernel = 7;
  std::size_t down_kernel = 3;
  std::size_t residual_blocks = 1;
  bool use_bin = true;

  void validate() const {
    if (latent_channels == 0 || latent_channels % 2 != 0)
      throw ConfigError("encoder latent_channels must be a positive even number");
    if (base_channels == 0 || stem_kernel % 2 == 0 || down_kernel % 2 == 0)
      throw ConfigError("encoder kernels must be odd and base_channels positive");
  }
  std::size_t stage_channels(std::size_t stage) const {
    if (stage >= num_downsamples) return latent_channels;
    return base_channels << stage;
  }
};

struct DecoderConfig {
  std::size_t out_channels = 3;
  std::size_t base_channels = 8;
  std::size_t num_upsamples = 2;
  std::size_t latent_channels = 40;
  std::size_t up_kernel = 4;
  std::size_t out_kernel = 7;
  std::size_t residual_blocks = 1;
  bool use_bin = true;
  bool spectral = true;

  void validate() const {
    if (latent_channels == 0 || latent_channels % 2 != 0)
      throw ConfigError("decoder latent_channels must be a positive even number");
    if (up_kernel < 2 || out_kernel % 2 == 0) throw ConfigError("decoder kernel sizes are inconsistent");
  }
  // Channels after the i-th upsampling stage.
  std::size_t stage_channels(std::size_t stage) const { return base_channels << (num_upsamples - 1 - stage); }
};

struct DiscriminatorConfig {
  std::vector<std::size_t> channels{32, 64};
  std::size_t kernel = 4;
  double leaky_slope = 0.2;
  bool spectral = true;
};

struct PerceptualConfig {
  // Conv layers per block; a 2x2 max-pool separates consecutive blocks.
  std::vector<std::size_t> block_depths{2, 2, 3, 3};
  std::vector<std::size_t> block_widths{8, 16, 32, 32};
  std::uint64_t seed = 1234;
  // Multiplies the [-1, 1] input before the first conv.
  double input_scale = 1.0;
  std::string weights_path;  // optional archive with conv{b}_{i}.weight / .bias

  static PerceptualConfig vgg19() {
    PerceptualConfig cfg;
    cfg.block_depths = {2, 2, 4, 4};
    cfg.block_widths = {64, 128, 256, 512};
    return cfg;
  }
};

struct PerceptualTaps {
  std::vector<std::string> content_taps{"relu2_2"};
  std::vector<std::string> style_taps{"relu1_2", "relu2_2", "relu3_3", "relu4_3"};
};

struct I2ITConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  DiscriminatorConfig discriminator;
  PerceptualConfig perceptual;
  PerceptualTaps taps;
  bool shared_encoder = true;
  std::uint64_t init_seed = 0;

  void validate() const {
    encoder.validate();
    decoder.validate();
    if (encoder.latent_channels != decoder.latent_channels)
      throw ConfigError("encoder and decoder latent_channels differ");
    if (encoder.num_downsamples != decoder.num_upsamples)
      throw ConfigError("decoder must mirror the encoder's downsampling depth");
    if (taps.style_taps.empty()) throw ConfigError("at least one style tap is required");
    if (!(perceptual.input_scale > 0)) throw ConfigError("perceptual input scale must be positive");
    if (perceptual.block_depths.size() != perceptual.block_widths.size() || perceptual.block_depths.empty())
      throw ConfigError("perceptual block depths and widths must have equal non-zero length");
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("model.encoder.base_channels", encoder.base_channels);
    kv.set("model.encoder.num_downsamples", encoder.num_downsamples);
    kv.set("model.encoder.residual_blocks", encoder.residual_blocks);
    kv.set("model.latent_channels", encoder.latent_channels);
    kv.set("model.decoder.base_channels", decoder.base_channels);
    kv.set("model.decoder.residual_blocks", decoder.residual_blocks);
    kv.set("model.decoder.spectral", decoder.spectral);
    std::string dis;
    for (std::size_t i = 0; i < discriminator.channels.size(); ++i)
      dis += (i ? "," : "") + std::to_string(discriminator.channels[i]);
    kv.set("model.discriminator.channels", dis);
    kv.set("model.shared_encoder", shared_encoder);
    kv.set("model.init_seed", static_cast<std::int64_t>(init_seed));
    auto join = [](const auto& items) {
      std::string out;
      for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ",";
        if constexpr (std::is_same_v<std::decay_t<decltype(items[i])>, std::string>) out += items[i];
        else out += std::to_string(items[i]);
      }
      return out;
    };
    kv.set("model.perceptual.block_depths", join(perceptual.block_depths));
    kv.set("model.perceptual.block_widths", join(perceptual.block_widths));
    kv.set("model.perceptual.seed", static_cast<std::int64_t>(perceptual.seed));
    kv.set("model.perceptual.input_scale", perceptual.input_scale);
    kv.set("model.perceptual.weights", perceptual.weights_path);
    kv.set("model.taps.content", join(taps.content_taps));
    kv.set("model.taps.style", join(taps.style_taps));
    return kv;
  }

  static I2ITConfig from_key_values(const KeyValues& kv) {
    I2ITConfig cfg;
    auto sz = [&](const std::string& key, std::size_t fallback) {
      const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
      if (v < 0) throw ConfigError("config key `" + key + "` must be non-negative");
      return static_cast<std::size_t>(v);
    };
    auto split = [](const std::string& s) {
      std::vector<std::string> out;
      std::size_t pos = 0;
      while (pos <= s.size()) {
        const auto comma = std::min(s.find(',', pos), s.size());
        if (comma > pos) out.push_back(s.substr(pos, comma - pos));
        pos = comma + 1;
      }
      return out;
    };
    auto sizes = [&](const std::string& key, const std::vector<std::size_t>& fallback) {
      if (!kv.has(key)) return fallback;
      std::vector<std::size_t> out;
      for (const auto& item : split(kv.get_string(key, ""))) {
        try {
          out.push_back(static_cast<std::size_t>(std::stoul(item)));
        } catch (const std::exception&) {
          throw ConfigError("config key `" + key + "` must be a comma-separated list of integers");
        }
      }
      return out;
    };
    cfg.encoder.base_channels = sz("model.encoder.base_channels", cfg.encoder.base_channels);
    cfg.encoder.num_downsamples = sz("model.encoder.num_downsamples", cfg.encoder.num_downsamples);
    cfg.encoder.residual_blocks = sz("model.encoder.residual_blocks", cfg.encoder.residual_blocks);
    cfg.encoder.latent_channels = sz("model.latent_channels", cfg.encoder.latent_channels);
    cfg.decoder.latent_channels = cfg.encoder.latent_channels;
    cfg.decoder.num_upsamples = cfg.encoder.num_downsamples;
    cfg.decoder.base_channels = sz("model.decoder.base_channels", cfg.decoder.base_channels);
    cfg.decoder.residual_blocks = sz("model.decoder.residual_blocks", cfg.decoder.residual_blocks);
    cfg.decoder.spectral = kv.get_bool("model.decoder.spectral", cfg.decoder.spectral);
    cfg.discriminator.channels = sizes("model.discriminator.channels", cfg.discriminator.channels);
    cfg.shared_encoder = kv.get_bool("model.shared_encoder", cfg.shared_encoder);
    cfg.init_seed = static_cast<std::uint64_t>(kv.get_int("model.init_seed", 0));
    cfg.perceptual.block_depths = sizes("model.perceptual.block_depths", cfg.perceptual.block_depths);
    cfg.perceptual.block_widths = sizes("model.perceptual.block_widths", cfg.perceptual.block_widths);
    cfg.perceptual.seed = static_cast<std::uint64_t>(kv.get_int("model.perceptual.seed", 1234));
    cfg.perceptual.input_scale = kv.get_double("model.perceptual.input_scale", cfg.perceptual.input_scale);
    cfg.perceptual.weights_path = kv.get_string("model.perceptual.weights", "");
    if (kv.has("model.taps.content")) cfg.taps.content_taps = split(kv.get_string("model.taps.content", ""));
    if (kv.has("model.taps.style")) cfg.taps.style_taps = split(kv.get_string("model.taps.style", ""));
    cfg.validate();
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// Latent separation

template <class T>
struct LatentPair {
  Var<T> first_half;
  Var<T> second_half;
};

/// Splits a latent N x C x h x w along channels into [0, C/2) and [C/2, C).
template <class T>
LatentPair<T> separate(const Var<T>& latent) {
  detail::require_rank4(latent.shape(), "separate");
  const std::size_t c = latent.dim(1);
  if (c % 2 != 0) throw ConfigError("separate: latent channel count " + std::to_string(c) + " is odd");
  return {slice_channels(latent, 0, c / 2), slice_channels(latent, c / 2, c)};
}

template <class T>
Var<T> combine(const Var<T>& first, const Var<T>& second) {
  if (first.shape() != second.shape())
    throw ConfigError("combine: half shapes differ " + shape_str(first.shape()) + " vs " + shape_str(second.shape()));
  return concat_channels(first, second);
}

template <class T>
Var<T> combine(const LatentPair<T>& pair) {
  return combine(pair.first_half, pair.second_half);
}

// ---------------------------------------------------------------------------
// Building blocks

template <class T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::size_t channels, bool use_bin, bool spectral, Rng& rng)
      : conv1_(channels, channels, 3, 1, 1, spectral, rng),
        conv2_(channels, channels, 3, 1, 1, spectral, rng),
        use_bin_(use_bin) {
    if (use_bin_) {
      norm1_ = BatchInstanceNorm<T>(channels);
      norm2_ = BatchInstanceNorm<T>(channels);
    }
  }

  Var<T> forward(const Var<T>& x, bool training) {
    Var<T> h = conv1_.forward(x, training);
    if (use_bin_) h = norm1_.forward(h, training);
    h = relu(h);
    h = conv2_.forward(h, training);
    if (use_bin_) h = norm2_.forward(h, training);
    return add(x, h);
  }

  void collect(const std::string& prefix, NamedState<T>& state) {
    conv1_.collect(prefix + ".conv1", state);
    if (use_bin_) norm1_.collect(prefix + ".norm1", state);
    conv2_.collect(prefix + ".conv2", state);
    if (use_bin_) norm2_.collect(prefix + ".norm2", state);
  }

  std::vector<Conv2d<T>*> convs() { return {&conv1_, &conv2_}; }

 private:
  Conv2d<T> conv1_, conv2_;
  BatchInstanceNorm<T> norm1_, norm2_;
  bool use_bin_ = true;
};

// ---------------------------------------------------------------------------
// Encoder E

template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    stem_ = Conv2d<T>(cfg.in_channels, cfg.stage_channels(0), cfg.stem_kernel, 1, cfg.stem_kernel / 2, false, rng);
    stem_norm_ = BatchInstanceNorm<T>(cfg.stage_channels(0));
    for (std::size_t i = 0; i < cfg.num_downsamples; ++i) {
      const std::size_t cin = cfg.stage_channels(i), cout = cfg.stage_channels(i + 1);
      down_.emplace_back(cin, cout, cfg.down_kernel, 2, cfg.down_kernel / 2, false, rng);
      down_norm_.emplace_back(cout);
    }
    for (std::size_t i = 0; i < cfg.residual_blocks; ++i)
      blocks_.emplace_back(cfg.latent_channels, cfg.use_bin, false, rng);
  }

  Var<T> forward(const Var<T>& image, bool training) {
    detail::require_rank4(image.shape(), "encode");
    const std::size_t factor = std::size_t{1} << cfg_.num_downsamples;
    if (image.dim(1) != cfg_.in_channels)
      throw ConfigError("encode: expected " + std::to_string(cfg_.in_channels) + " input channels");
    if (image.dim(2) % factor || image.dim(3) % factor)
      throw ConfigError("encode: spatial size " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                        " is not divisible by " + std::to_string(factor));
    Var<T> h = stem_.forward(image, training);
    if (cfg_.use_bin) h = stem_norm_.forward(h, training);
    h = relu(h);
    for (std::size_t i = 0; i < down_.size(); ++i) {
      h = down_[i].forward(h, training);
      if (cfg_.use_bin) h = down_norm_[i].forward(h, training);
      h = relu(h);
    }
    for (auto& block : blocks_) h = block.forward(h, training);
    return h;
  }

  void collect(const std::string& prefix, NamedState<T>& state) {
    stem_.collect(prefix + ".stem", state);
    if (cfg_.use_bin) stem_norm_.collect(prefix + ".stem_norm", state);
    for (std::size_t i = 0; i < down_.size(); ++i) {
      down_[i].collect(prefix + ".down" + std::to_string(i), state);
      if (cfg_.use_bin) down_norm_[i].collect(prefix + ".down" + std::to_string(i) + "_norm", state);
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".res" + std::to_string(i), state);
  }

  const EncoderConfig& config() const noexcept { return cfg_; }

 private:
  EncoderConfig cfg_;
  Conv2d<T> stem_;
  BatchInstanceNorm<T> stem_norm_;
  std::vector<Conv2d<T>> down_;
  std::vector<BatchInstanceNorm<T>> down_norm_;
  std::vector<ResidualBlock<T>> blocks_;
};

// ---------------------------------------------------------------------------
// Decoder D

template <class T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    for (std::size_t i = 0; i < cfg.residual_blocks; ++i)
      blocks_.emplace_back(cfg.latent_channels, cfg.use_bin, cfg.spectral, rng);
    std::size_t cin = cfg.latent_channels;
    for (std::size_t i = 0; i < cfg.num_upsamples; ++i) {
      const std::size_t cout = cfg.stage_channels(i);
      up_.emplace_back(cin, cout, cfg.up_kernel, 2, (cfg.up_kernel - 2) / 2, cfg.spectral, rng);
      up_norm_.emplace_back(cout);
      cin = cout;
    }
    out_ = Conv2d<T>(cin, cfg.out_channels, cfg.out_kernel, 1, cfg.out_kernel / 2, cfg.spectral, rng);
  }

  /// Concatenates the halves along channels and decodes to an image in [-1, 1].
  Var<T> forward(const Var<T>& first, const Var<T>& second, bool training) {
    if (first.shape() != second.shape())
      throw ConfigError("decode: half shapes differ " + shape_str(first.shape()) + " vs " + shape_str(second.shape()));
    detail::require_rank4(first.shape(), "decode");
    if (first.dim(1) * 2 != cfg_.latent_channels)
      throw ConfigError("decode: halves carry " + std::to_string(first.dim(1)) + " channels, decoder expects " +
                        std::to_string(cfg_.latent_channels / 2));
    Var<T> h = concat_channels(first, second);
    for (auto& block : blocks_) h = block.forward(h, training);
    for (std::size_t i = 0; i < up_.size(); ++i) {
      h = up_[i].forward(h, training);
      if (cfg_.use_bin) h = up_norm_[i].forward(h, training);
      h = relu(h);
    }
    return tanh(out_.forward(h, training));
  }

  void collect(const std::string& prefix, NamedState<T>& state) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".res" + std::to_string(i), state);
    for (std::size_t i = 0; i < up_.size(); ++i) {
      up_[i].collect(prefix + ".up" + std::to_string(i), state);
      if (cfg_.use_bin) up_norm_[i].collect(prefix + ".up" + std::to_string(i) + "_norm", state);
    }
    out_.collect(prefix + ".out", state);
  }

  /// Spectrally normalised weights as seen by the forward pass.
  std::vector<Tensor<T>> effective_weights() {
    std::vector<Tensor<T>> out;
    for (auto& block : blocks_)
      for (auto* conv : block.convs()) out.push_back(conv->effective_weight());
    for (auto& up : up_) out.push_back(up.effective_weight());
    out.push_back(out_.effective_weight());
    return out;
  }

  const DecoderConfig& config() const noexcept { return cfg_; }

 private:
  DecoderConfig cfg_;
  std::vector<ResidualBlock<T>> blocks_;
  std::vector<ConvTranspose2d<T>> up_;
  std::vector<BatchInstanceNorm<T>> up_norm_;
  Conv2d<T> out_;
};

// ---------------------------------------------------------------------------
// Discriminator Dis: strided patch classifier with spectral normalisation.

template <class T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& cfg, Rng& rng) : cfg_(cfg) {
    std::size_t cin = 3;
    const std::size_t pad = (cfg.kernel - 2) / 2;
    for (std::size_t width : cfg.channels) {
      layers_.emplace_back(cin, width, cfg.kernel, 2, pad, cfg.spectral, rng);
      cin = width;
    }
    layers_.emplace_back(cin, 1, cfg.kernel, 2, pad, cfg.spectral, rng);
  }

  /// Patch score map N x 1 x p x p.
  Var<T> forward(const Var<T>& image, bool training) {
    Var<T> h = image;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h, training);
      if (i + 1 < layers_.size()) h = leaky_relu(h, static_cast<T>(cfg_.leaky_slope));
    }
    return h;
  }

  void collect(const std::string& prefix, NamedState<T>& state) {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + ".conv" + std::to_string(i), state);
  }

  std::vector<Tensor<T>> effective_weights() {
    std::vector<Tensor<T>> out;
    for (auto& l : layers_) out.push_back(l.effective_weight());
    return out;
  }

  std::vector<Conv2d<T>>& layers() noexcept { return layers_; }

 private:
  DiscriminatorConfig cfg_;
  std::vector<Conv2d<T>> layers_;
};

// ---------------------------------------------------------------------------
// Perceptual network P: frozen VGG-style conv stack with named ReLU taps.

template <class T>
class PerceptualNet {
 public:
  PerceptualNet() = default;
  explicit PerceptualNet(const PerceptualConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.seed);
    std::size_t cin = 3;
    for (std::size_t b = 0; b < cfg.block_depths.size(); ++b) {
      for (std::size_t i = 0; i < cfg.block_depths[b]; ++i) {
        layers_.push_back({"conv" + std::to_string(b + 1) + "_" + std::to_string(i + 1),
                           "relu" + std::to_string(b + 1) + "_" + std::to_string(i + 1), b,
                           Conv2d<T>(cin, cfg.block_widths[b], 3, 1, 1, false, rng)});
        cin = cfg.block_widths[b];
      }
    }
    if (!cfg.weights_path.empty()) {
      auto state = named_state();
      import_state(state, read_archive(cfg.weights_path), cfg.weights_path);
    }
    for (auto& layer : layers_) {
      layer.conv.weight.set_frozen(true);
      layer.conv.bias.set_frozen(true);
    }
  }

  bool has_layer(const std::string& name) const {
    return std::any_of(layers_.begin(), layers_.end(),
                       [&](const Layer& l) { return l.relu_name == name || l.conv_name == name; });
  }

  /// Activations at the requested taps, in request order. Gradients flow to
  /// the image but never into P's own weights.
  std::vector<std::pair<std::string, Var<T>>> features(const Var<T>& image, const std::vector<std::string>& taps) {
    std::size_t deepest = 0;
    for (const auto& tap : taps) {
      const auto it = std::find_if(layers_.begin(), layers_.end(),
                                   [&](const Layer& l) { return l.relu_name == tap || l.conv_name == tap; });
      if (it == layers_.end()) throw ConfigError("perceptual network has no layer named `" + tap + "`");
      deepest = std::max(deepest, static_cast<std::size_t>(it - layers_.begin()) + 1);
    }
    std::vector<std::pair<std::string, Var<T>>> found;
    Var<T> h = cfg_.input_scale == 1.0 ? image : scale(image, static_cast<T>(cfg_.input_scale));
    for (std::size_t i = 0; i < deepest; ++i) {
      if (i > 0 && layers_[i].block != layers_[i - 1].block) h = max_pool2d(h, 2);
      h = layers_[i].conv.forward(h, false);
      found.emplace_back(layers_[i].conv_name, h);
      h = relu(h);
      found.emplace_back(layers_[i].relu_name, h);
    }
    std::vector<std::pair<std::string, Var<T>>> out;
    for (const auto& tap : taps)
      for (const auto& [name, v] : found)
        if (name == tap) {
          out.emplace_back(tap, v);
          break;
        }
    return out;
  }

  NamedState<T> named_state() {
    NamedState<T> state;
    for (auto& layer : layers_) layer.conv.collect(layer.conv_name, state);
    return state;
  }

  const PerceptualConfig& config() const noexcept { return cfg_; }

 private:
  struct Layer {
    std::string conv_name;
    std::string relu_name;
    std::size_t block;
    Conv2d<T> conv;
  };
  PerceptualConfig cfg_;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Full I2IT model: E (shared or per-domain), Sep, D, Dis.

template <class T>
class I2ITModel {
 public:
  explicit I2ITModel(const I2ITConfig& cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg.init_seed);
    encoder_ = Encoder<T>(cfg.encoder, rng);
    if (!cfg.shared_encoder) target_encoder_ = Encoder<T>(cfg.encoder, rng);
    decoder_ = Decoder<T>(cfg.decoder, rng);
    discriminator_ = Discriminator<T>(cfg.discriminator, rng);
  }

  Var<T> encode_source(const Var<T>& image, bool training) { return encoder_.forward(image, training); }
  Var<T> encode_target(const Var<T>& image, bool training) {
    return target_encoder_ ? target_encoder_->forward(image, training) : encoder_.forward(image, training);
  }
  Var<T> decode(const Var<T>& first, const Var<T>& second, bool training) {
    return decoder_.forward(first, second, training);
  }
  Var<T> discriminate(const Var<T>& image, bool training) { return discriminator_.forward(image, training); }

  NamedState<T> generator_state() {
    NamedState<T> state;
    encoder_.collect("encoder", state);
    if (target_encoder_) target_encoder_->collect("target_encoder", state);
    decoder_.collect("decoder", state);
    return state;
  }
  NamedState<T> discriminator_state() {
    NamedState<T> state;
    discriminator_.collect("discriminator", state);
    return state;
  }
  NamedState<T> full_state() {
    NamedState<T> state = generator_state();
    auto dis = discriminator_state();
    state.parameters.insert(state.parameters.end(), dis.parameters.begin(), dis.parameters.end());
    state.buffers.insert(state.buffers.end(), dis.buffers.begin(), dis.buffers.end());
    return state;
  }

  Encoder<T>& encoder() noexcept { return encoder_; }
  Decoder<T>& decoder() noexcept { return decoder_; }
  Discriminator<T>& discriminator() noexcept { return discriminator_; }
  const I2ITConfig& config() const noexcept { return cfg_; }

 private:
  I2ITConfig cfg_;
  Encoder<T> encoder_;
  std::optional<Encoder<T>> target_encoder_;
  Decoder<T> decoder_;
  Discriminator<T> discriminator_;
};

struct ModelSummary {
  std::size_t encoder = 0;
  std::size_t decoder = 0;
  std::size_t discriminator = 0;
  std::size_t generator() const { return encoder + decoder; }
  std::size_t total() const { return encoder + decoder + discriminator; }
};

/// Trainable parameter counts per component. P is frozen and excluded.
template <class T>
ModelSummary summarize_model(I2ITModel<T>& model) {
  ModelSummary s;
  for (auto& [name, p] : model.generator_state().parameters)
    (name.rfind("decoder.", 0) == 0 ? s.decoder : s.encoder) += p->value().size();
  s.discriminator = model.discriminator_state().parameter_count();
  return s;
}

}  // namespace lrmix
