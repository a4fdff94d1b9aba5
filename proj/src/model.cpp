#include "lbq/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lbq/optim.hpp"

namespace lbq {

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1 || max_seq_len < 1)
    throw ConfigError("model extents must all be >= 1");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (!(rms_norm_eps > 0.0f)) throw ConfigError("rms_norm_eps must be positive");
}

std::size_t slot_rows(const LinearSlot& s) {
  return std::visit(
      [](const auto& l) -> std::size_t {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, FullLinear>) return l.weight.dim(0);
        else return l.rows;
      },
      s);
}

std::size_t slot_cols(const LinearSlot& s) {
  return std::visit(
      [](const auto& l) -> std::size_t {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, FullLinear>) return l.weight.dim(1);
        else return l.cols;
      },
      s);
}

const char* site_name(Site s) {
  static const char* names[] = {"attn_in", "o_in", "mlp_in", "down_in", "kv_k", "kv_v"};
  return names[static_cast<int>(s)];
}

std::vector<LinearSlot*> DecoderLayer::slots() { return {&q, &k, &v, &o, &up, &gate, &down}; }
std::vector<const LinearSlot*> DecoderLayer::slots() const {
  return {&q, &k, &v, &o, &up, &gate, &down};
}

const std::array<const char*, 7>& DecoderLayer::slot_names() {
  static const std::array<const char*, 7> n{"q", "k", "v", "o", "up", "gate", "down"};
  return n;
}

namespace {

LinearSlot clone_slot(const LinearSlot& s) {
  return std::visit(
      [](const auto& l) -> LinearSlot {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, FullLinear>) return FullLinear{l.weight.clone()};
        else if constexpr (std::is_same_v<T, QuantLinear>) return l.clone();
        else return l;
      },
      s);
}

Tensor quantize_input(const Tensor& x, const ForwardMode& mode, const ActQuantParams* site) {
  if (!site || mode.acts == ActPath::None) return x;
  return mode.acts == ActPath::Train ? act_quantize_train(x, *site) : act_quantize_forward(x, *site);
}

const ActQuantParams* site_of(const DecoderLayer& layer, Site s) {
  return layer.acts ? &(*layer.acts)[static_cast<int>(s)] : nullptr;
}

void capture(const ForwardMode& mode, Site s, const Tensor& x) {
  if (mode.capture && *mode.capture) (*mode.capture)(s, x);
}

Tensor random_param(Shape shape, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> nd(0.0f, stddev);
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) x = nd(rng);
  return Tensor::param(std::move(shape), std::move(v));
}

}  // namespace

DecoderLayer DecoderLayer::clone() const {
  DecoderLayer c;
  c.q = clone_slot(q);
  c.k = clone_slot(k);
  c.v = clone_slot(v);
  c.o = clone_slot(o);
  c.up = clone_slot(up);
  c.gate = clone_slot(gate);
  c.down = clone_slot(down);
  c.norm1 = norm1.clone();
  c.norm2 = norm2.clone();
  if (acts) {
    ActSites s;
    for (std::size_t i = 0; i < kSiteCount; ++i) s[i] = (*acts)[i].clone();
    c.acts = std::move(s);
  }
  return c;
}

void KVCache::reset(std::size_t layers) {
  keys.assign(layers, Tensor());
  values.assign(layers, Tensor());
  length = 0;
}

Tensor linear_forward(const LinearSlot& slot, const Tensor& x, const ForwardMode& mode,
                      const ActQuantParams* site) {
  if (x.rank() != 2 || x.dim(1) != slot_cols(slot))
    throw DimensionError("linear_forward: input " + shape_str(x.shape()) + " does not match " +
                         std::to_string(slot_cols(slot)) + " input features");
  if (const auto* packed = std::get_if<PackedLayer>(&slot)) {
    if (site && mode.acts != ActPath::None) {
      return Tensor::from({x.dim(0), packed->rows}, packed_matmul(act_encode(x, *site), *packed));
    }
    return matmul_nt(x, Tensor::from({packed->rows, packed->cols}, packed->dequantize()));
  }
  const Tensor xin = quantize_input(x, mode, site);
  if (const auto* full = std::get_if<FullLinear>(&slot)) return matmul_nt(xin, full->weight);
  const auto& q = std::get<QuantLinear>(slot);
  const DequantMode dm =
      mode.weights == WeightPath::Ste && !q.frozen ? DequantMode::Ste : DequantMode::Hard;
  return matmul_nt(xin, dequantize_grouped(q, dm));
}

Tensor decoder_forward(const DecoderLayer& layer, const Tensor& x, const ModelConfig& cfg,
                       const ForwardMode& mode, KVCache* cache, std::size_t layer_index) {
  if (x.rank() != 2 || x.dim(1) != cfg.d_model)
    throw DimensionError("decoder_forward: expected [seq x " + std::to_string(cfg.d_model) + "]");
  const std::size_t seq = x.dim(0), hd = cfg.head_dim();
  std::size_t offset = 0;
  if (cache) {
    if (cache->keys.size() <= layer_index) throw ContractError("KV cache has too few layers");
    if (cache->keys[layer_index].defined()) offset = cache->keys[layer_index].dim(0);
  }
  if (offset + seq > cfg.max_seq_len)
    throw ContractError("sequence length " + std::to_string(offset + seq) + " exceeds max_seq_len");

  const Tensor h = rms_norm(x, layer.norm1, cfg.rms_norm_eps);
  capture(mode, Site::AttnIn, h);
  const ActQuantParams* attn_in = site_of(layer, Site::AttnIn);
  const Tensor q = linear_forward(layer.q, h, mode, attn_in);
  Tensor k = linear_forward(layer.k, h, mode, attn_in);
  Tensor v = linear_forward(layer.v, h, mode, attn_in);
  capture(mode, Site::KvK, k);
  capture(mode, Site::KvV, v);
  if (layer.acts && mode.acts != ActPath::None && mode.kv_quant) {
    const bool train = mode.acts == ActPath::Train;
    k = quantize_kv(k, *site_of(layer, Site::KvK), train);
    v = quantize_kv(v, *site_of(layer, Site::KvV), train);
  }
  if (cache) {
    Tensor& ck = cache->keys[layer_index];
    Tensor& cv = cache->values[layer_index];
    if (ck.defined()) {
      k = concat({ck, k}, 0);
      v = concat({cv, v}, 0);
    }
    ck = k.detach();
    cv = v.detach();
  }
  const float inv = 1.0f / std::sqrt(float(hd));
  std::vector<Tensor> heads;
  heads.reserve(cfg.n_heads);
  for (std::size_t hi = 0; hi < cfg.n_heads; ++hi) {
    const Tensor qh = slice(q, 1, hi * hd, (hi + 1) * hd);
    const Tensor kh = slice(k, 1, hi * hd, (hi + 1) * hd);
    const Tensor vh = slice(v, 1, hi * hd, (hi + 1) * hd);
    const Tensor p = causal_softmax(mul(matmul_nt(qh, kh), inv), offset);
    heads.push_back(matmul(p, vh));
  }
  const Tensor attn = cfg.n_heads == 1 ? heads[0] : concat(heads, 1);
  capture(mode, Site::OIn, attn);
  const Tensor x1 = add(x, linear_forward(layer.o, attn, mode, site_of(layer, Site::OIn)));

  const Tensor h2 = rms_norm(x1, layer.norm2, cfg.rms_norm_eps);
  capture(mode, Site::MlpIn, h2);
  const ActQuantParams* mlp_in = site_of(layer, Site::MlpIn);
  const Tensor up = linear_forward(layer.up, h2, mode, mlp_in);
  const Tensor gate = linear_forward(layer.gate, h2, mode, mlp_in);
  const Tensor act = mul(silu(gate), up);
  capture(mode, Site::DownIn, act);
  return add(x1, linear_forward(layer.down, act, mode, site_of(layer, Site::DownIn)));
}

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.cfg = cfg;
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  m.tok_emb = random_param({cfg.vocab_size, d}, 0.1f, rng);
  m.pos_emb = random_param({cfg.max_seq_len, d}, 0.02f, rng);
  m.final_norm = Tensor::param({d}, 1.0f);
  m.lm_head = random_param({cfg.vocab_size, d}, 1.0f / std::sqrt(float(d)), rng);
  const float in_d = 1.0f / std::sqrt(float(d)), in_f = 1.0f / std::sqrt(float(f));
  const float res = 1.0f / std::sqrt(2.0f * float(cfg.n_layers));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    DecoderLayer L;
    L.q = FullLinear{random_param({d, d}, in_d, rng)};
    L.k = FullLinear{random_param({d, d}, in_d, rng)};
    L.v = FullLinear{random_param({d, d}, in_d, rng)};
    L.o = FullLinear{random_param({d, d}, in_d * res, rng)};
    L.up = FullLinear{random_param({f, d}, in_d, rng)};
    L.gate = FullLinear{random_param({f, d}, in_d, rng)};
    L.down = FullLinear{random_param({d, f}, in_f * res, rng)};
    L.norm1 = Tensor::param({d}, 1.0f);
    L.norm2 = Tensor::param({d}, 1.0f);
    m.layers.push_back(std::move(L));
  }
  return m;
}

Model Model::clone() const {
  Model m;
  m.cfg = cfg;
  m.tok_emb = tok_emb.clone();
  m.pos_emb = pos_emb.clone();
  m.final_norm = final_norm.clone();
  m.lm_head = lm_head.clone();
  for (const auto& l : layers) m.layers.push_back(l.clone());
  return m;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> p{tok_emb, pos_emb, final_norm, lm_head};
  for (const auto& l : layers) {
    p.push_back(l.norm1);
    p.push_back(l.norm2);
    for (const LinearSlot* s : l.slots())
      if (const auto* f = std::get_if<FullLinear>(s)) p.push_back(f->weight);
  }
  return p;
}

std::uint64_t Model::unquantized_param_count() const {
  std::uint64_t n = tok_emb.size() + pos_emb.size() + final_norm.size() + lm_head.size();
  for (const auto& l : layers) n += l.norm1.size() + l.norm2.size();
  return n;
}

Tensor embed(const Model& model, std::span<const int> ids, std::size_t offset) {
  for (int id : ids)
    if (id < 0 || std::size_t(id) >= model.cfg.vocab_size)
      throw ContractError("token id " + std::to_string(id) + " is out of vocabulary");
  if (offset + ids.size() > model.cfg.max_seq_len)
    throw ContractError("sequence length exceeds max_seq_len");
  return add(gather_rows(model.tok_emb, ids), slice(model.pos_emb, 0, offset, offset + ids.size()));
}

Tensor head(const Model& model, const Tensor& hidden) {
  return matmul_nt(rms_norm(hidden, model.final_norm, model.cfg.rms_norm_eps), model.lm_head);
}

Tensor model_forward(const Model& model, std::span<const int> ids, const ForwardMode& mode,
                     KVCache* cache) {
  if (ids.empty()) throw ContractError("model_forward: empty input");
  if (cache && cache->keys.size() != model.layers.size()) cache->reset(model.layers.size());
  Tensor x = embed(model, ids, cache ? cache->length : 0);
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    x = decoder_forward(model.layers[l], x, model.cfg, mode, cache, l);
  if (cache) cache->length += ids.size();
  return head(model, x);
}

double perplexity(const LogitsFn& logits, std::span<const int> ids, std::size_t window) {
  if (ids.size() < 2) throw ContractError("perplexity needs at least two tokens");
  if (window == 0) throw ContractError("perplexity window must be positive");
  NoGradGuard guard;
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + 1 < ids.size(); start += window) {
    const std::size_t end = std::min(start + window, ids.size() - 1);
    const Tensor out = logits(ids.subspan(start, end - start));
    const std::size_t v = out.dim(1);
    auto d = out.data();
    for (std::size_t i = 0; i < end - start; ++i) {
      const float* row = d.data() + i * v;
      const double mx = *std::max_element(row, row + v);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(double(row[j]) - mx);
      nll += mx + std::log(z) - double(row[ids[start + i + 1]]);
      ++count;
    }
  }
  return std::exp(nll / double(count));
}

double perplexity(const Model& model, std::span<const int> ids, const ForwardMode& mode) {
  return perplexity([&](std::span<const int> w) { return model_forward(model, w, mode); }, ids,
                    model.cfg.max_seq_len);
}

MemoryReport model_memory_report(const Model& model) {
  std::vector<const PackedLayer*> layers;
  std::vector<std::string> names;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto slots = model.layers[l].slots();
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const auto* p = std::get_if<PackedLayer>(slots[s]);
      if (!p) throw ContractError("memory report needs every linear slot packed");
      layers.push_back(p);
      names.push_back("layers." + std::to_string(l) + "." + DecoderLayer::slot_names()[s]);
    }
  }
  return memory_report(layers, names, model.unquantized_param_count());
}

// ---- distillation blocks ---------------------------------------------------

namespace {

ActQuantParams site_from(const std::vector<float>& sample, int total_bits, std::array<int, 3> bits) {
  auto p = ActQuantParams::from_percentiles(sample, bits, total_bits);
  return p;
}

}  // namespace

Tensor DecoderBlock::forward(const Tensor& x, const ForwardMode& mode) const {
  return decoder_forward(layer_, x, cfg_, mode);
}

std::vector<QuantLinear*> DecoderBlock::quant_linears() {
  std::vector<QuantLinear*> out;
  for (LinearSlot* s : layer_.slots())
    if (auto* q = std::get_if<QuantLinear>(s)) out.push_back(q);
  return out;
}

std::vector<ActQuantParams*> DecoderBlock::act_sites() {
  std::vector<ActQuantParams*> out;
  if (layer_.acts)
    for (auto& p : *layer_.acts) out.push_back(&p);
  return out;
}

void DecoderBlock::attach_sites(const std::vector<Tensor>& calibration, int total_bits,
                                std::array<int, 3> bits) {
  std::array<std::vector<float>, kSiteCount> seen;
  const SiteCapture cap = [&](Site s, const Tensor& t) {
    auto d = t.data();
    seen[static_cast<int>(s)].insert(seen[static_cast<int>(s)].end(), d.begin(), d.end());
  };
  ForwardMode mode;
  mode.capture = &cap;
  {
    NoGradGuard guard;
    layer_.acts.reset();
    for (const auto& x : calibration) decoder_forward(layer_, x, cfg_, mode);
  }
  ActSites sites;
  for (std::size_t i = 0; i < kSiteCount; ++i) sites[i] = site_from(seen[i], total_bits, bits);
  layer_.acts = std::move(sites);
}

Tensor LinearBlock::forward(const Tensor& x, const ForwardMode& mode) const {
  if (mode.capture && *mode.capture) (*mode.capture)(Site::AttnIn, x);
  return linear_forward(slot_, x, mode, site_ ? &*site_ : nullptr);
}

std::vector<QuantLinear*> LinearBlock::quant_linears() {
  if (auto* q = std::get_if<QuantLinear>(&slot_)) return {q};
  return {};
}

std::vector<ActQuantParams*> LinearBlock::act_sites() {
  if (site_) return {&*site_};
  return {};
}

void LinearBlock::attach_sites(const std::vector<Tensor>& calibration, int total_bits,
                               std::array<int, 3> bits) {
  std::vector<float> seen;
  for (const auto& x : calibration) seen.insert(seen.end(), x.data().begin(), x.data().end());
  site_ = site_from(seen, total_bits, bits);
}

std::vector<double> train_teacher(Model& model, std::span<const int> ids,
                                  const TeacherTrainOptions& opt) {
  if (ids.size() < opt.seq_len + 2) throw ContractError("teacher corpus shorter than one window");
  if (opt.seq_len > model.cfg.max_seq_len) throw ConfigError("teacher seq_len exceeds max_seq_len");
  Adam adam({ParamGroup{"teacher", model.parameters(), opt.lr, {}}});
  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<std::size_t> pick(0, ids.size() - opt.seq_len - 1);
  std::vector<double> losses;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    adam.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const std::size_t s = pick(rng);
      const Tensor logits = model_forward(model, ids.subspan(s, opt.seq_len));
      const Tensor loss = cross_entropy(logits, ids.subspan(s + 1, opt.seq_len));
      total += loss.item();
      backward(mul(loss, 1.0f / float(opt.batch)));
    }
    adam.step();
    losses.push_back(total / double(opt.batch));
  }
  return losses;
}

}  // namespace lbq
