#pragma once
// Byte-level decoder-only transformer: learned absolute positions, pre-norm
// RMSNorm, causal multi-head attention and a SwiGLU MLP. Linear weights are
// stored [out x in]. Each projection is a LinearSlot holding exactly one of
// a full-precision, relaxed-quantized or packed representation; embeddings,
// norms and the output head stay full precision.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lbq/act_quant.hpp"
#include "lbq/packed.hpp"
#include "lbq/weight_quant.hpp"

namespace lbq {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t d_ff = 192;
  std::size_t max_seq_len = 128;
  float rms_norm_eps = 1e-5f;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;  // ConfigError on invalid extents
};

struct FullLinear {
  Tensor weight;  // [out x in]
};

using LinearSlot = std::variant<FullLinear, QuantLinear, PackedLayer>;

std::size_t slot_rows(const LinearSlot& s);
std::size_t slot_cols(const LinearSlot& s);

/// Activation quantization sites of one decoder layer.
enum class Site : int { AttnIn = 0, OIn, MlpIn, DownIn, KvK, KvV };
inline constexpr std::size_t kSiteCount = 6;
const char* site_name(Site s);

using ActSites = std::array<ActQuantParams, kSiteCount>;

enum class WeightPath { Hard, Ste };
enum class ActPath { None, Forward, Train };

/// Records the full-precision input seen at every activation site.
using SiteCapture = std::function<void(Site, const Tensor&)>;

struct ForwardMode {
  WeightPath weights = WeightPath::Hard;
  ActPath acts = ActPath::None;
  bool kv_quant = true;  // quantize K/V when acts != None
  const SiteCapture* capture = nullptr;
};

struct DecoderLayer {
  LinearSlot q, k, v, o, up, gate, down;
  Tensor norm1, norm2;  // [d_model]
  std::optional<ActSites> acts;

  std::vector<LinearSlot*> slots();
  std::vector<const LinearSlot*> slots() const;
  static const std::array<const char*, 7>& slot_names();
  DecoderLayer clone() const;
};

/// Per-layer K/V history, rows are positions: [len x d_model].
struct KVCache {
  std::vector<Tensor> keys, values;
  std::size_t length = 0;
  void reset(std::size_t layers);
};

/// Applies a slot to x [seq x in] -> [seq x out], quantizing x with `site`
/// first when the mode asks for it.
Tensor linear_forward(const LinearSlot& slot, const Tensor& x, const ForwardMode& mode,
                      const ActQuantParams* site);

/// One decoder layer. With a cache, K/V of the new positions are appended
/// and attention covers the whole history.
Tensor decoder_forward(const DecoderLayer& layer, const Tensor& x, const ModelConfig& cfg,
                       const ForwardMode& mode, KVCache* cache = nullptr,
                       std::size_t layer_index = 0);

struct Model {
  ModelConfig cfg;
  Tensor tok_emb;     // [vocab x d_model]
  Tensor pos_emb;     // [max_seq_len x d_model]
  Tensor final_norm;  // [d_model]
  Tensor lm_head;     // [vocab x d_model]
  std::vector<DecoderLayer> layers;

  static Model init(const ModelConfig& cfg, std::uint64_t seed);
  Model clone() const;
  /// Every trainable tensor of a full-precision model.
  std::vector<Tensor> parameters() const;
  std::uint64_t unquantized_param_count() const;
};

/// Token embeddings plus positions [offset, offset + n).
Tensor embed(const Model& model, std::span<const int> ids, std::size_t offset = 0);
/// Final norm and output projection.
Tensor head(const Model& model, const Tensor& hidden);

Tensor model_forward(const Model& model, std::span<const int> ids,
                     const ForwardMode& mode = {}, KVCache* cache = nullptr);

using LogitsFn = std::function<Tensor(std::span<const int>)>;

/// exp(mean next-token NLL) over non-overlapping windows of `window` inputs.
double perplexity(const LogitsFn& logits, std::span<const int> ids, std::size_t window);
double perplexity(const Model& model, std::span<const int> ids, const ForwardMode& mode = {});

MemoryReport model_memory_report(const Model& model);

/// Unit of layer-wise distillation: runs under any weight/activation path and
/// exposes its trainable quantization state.
class Block {
 public:
  virtual ~Block() = default;
  virtual Tensor forward(const Tensor& x, const ForwardMode& mode) const = 0;
  virtual std::vector<QuantLinear*> quant_linears() = 0;
  /// Activation sites in use, or empty when none are attached.
  virtual std::vector<ActQuantParams*> act_sites() = 0;
  /// Attaches sites using a capture of the block's current inputs.
  virtual void attach_sites(const std::vector<Tensor>& calibration, int total_bits,
                            std::array<int, 3> bits) = 0;
  virtual void detach_sites() = 0;
};

class DecoderBlock final : public Block {
 public:
  DecoderBlock(DecoderLayer& layer, const ModelConfig& cfg) : layer_(layer), cfg_(cfg) {}
  Tensor forward(const Tensor& x, const ForwardMode& mode) const override;
  std::vector<QuantLinear*> quant_linears() override;
  std::vector<ActQuantParams*> act_sites() override;
  void attach_sites(const std::vector<Tensor>& calibration, int total_bits,
                    std::array<int, 3> bits) override;
  void detach_sites() override { layer_.acts.reset(); }

 private:
  DecoderLayer& layer_;
  const ModelConfig& cfg_;
};

/// A single linear map with one input site; used for small-scale checks.
class LinearBlock final : public Block {
 public:
  explicit LinearBlock(LinearSlot slot) : slot_(std::move(slot)) {}
  Tensor forward(const Tensor& x, const ForwardMode& mode) const override;
  std::vector<QuantLinear*> quant_linears() override;
  std::vector<ActQuantParams*> act_sites() override;
  void attach_sites(const std::vector<Tensor>& calibration, int total_bits,
                    std::array<int, 3> bits) override;
  void detach_sites() override { site_.reset(); }
  LinearSlot& slot() { return slot_; }

 private:
  LinearSlot slot_;
  std::optional<ActQuantParams> site_;
};

struct TeacherTrainOptions {
  std::size_t steps = 300;
  std::size_t batch = 4;
  std::size_t seq_len = 128;
  float lr = 3e-3f;
  std::uint64_t seed = 1;
};

/// Trains a full-precision model on random windows of `ids`; returns the
/// per-step mean cross-entropy.
std::vector<double> train_teacher(Model& model, std::span<const int> ids,
                                  const TeacherTrainOptions& opt);

}  // namespace lbq
