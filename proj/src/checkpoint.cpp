#include "lbq/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace lbq {

static_assert(std::endian::native == std::endian::little,
              "checkpoint code assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', 'B', 'Q', '1'};

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  template <class T>
  void put_array(std::span<const T> v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    out_.insert(out_.end(), p, p + v.size_bytes());
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  template <class T>
  std::vector<T> get_array(std::size_t n) {
    if (n > (in_.size() - pos_) / sizeof(T)) throw FormatError("checkpoint truncated");
    std::vector<T> v(n);
    std::memcpy(v.data(), in_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > in_.size() - pos_) throw FormatError("checkpoint truncated");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

}  // namespace

std::vector<std::uint8_t> serialize_records(const std::vector<Record>& records) {
  std::vector<std::uint8_t> out;
  Writer w(out);
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    const std::size_t start = out.size();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.type));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.path.size()));
    w.put_bytes(r.path.data(), r.path.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) w.put<std::uint64_t>(d);
    w.put<std::uint32_t>(r.group_size);
    w.put<std::uint64_t>(r.payload.size());
    w.put_bytes(r.payload.data(), r.payload.size());
    w.put<std::uint32_t>(crc(std::span(out).subspan(start)));
  }
  return out;
}

std::vector<Record> parse_records(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("not an LBQ1 checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<Record> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.pos();
    Record rec;
    const auto type = r.get<std::uint32_t>();
    if (type < 1 || type > 5) throw FormatError("unknown record type " + std::to_string(type));
    rec.type = static_cast<RecordType>(type);
    const auto plen = r.get<std::uint32_t>();
    const auto path = r.take(plen);
    rec.path.assign(path.begin(), path.end());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("record rank too large");
    for (std::uint32_t d = 0; d < rank; ++d) rec.dims.push_back(r.get<std::uint64_t>());
    rec.group_size = r.get<std::uint32_t>();
    const auto len = r.get<std::uint64_t>();
    const auto payload = r.take(static_cast<std::size_t>(len));
    rec.payload.assign(payload.begin(), payload.end());
    const std::size_t end = r.pos();
    const auto stored = r.get<std::uint32_t>();
    if (stored != crc(bytes.subspan(start, end - start)))
      throw FormatError("checksum mismatch in record '" + rec.path + "'");
    out.push_back(std::move(rec));
  }
  if (!r.done()) throw FormatError("trailing bytes after the last record");
  return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

std::string meta_get(const Meta& meta, const std::string& key, const std::string& fallback) {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  return fallback;
}

// ---- model <-> records --------------------------------------------------------

namespace {

Record fp_record(const std::string& path, const Tensor& t) {
  Record r;
  r.type = RecordType::FpWeights;
  r.path = path;
  for (auto d : t.shape()) r.dims.push_back(d);
  Writer(r.payload).put_array<float>(t.data());
  return r;
}

Tensor fp_tensor(const Record& r, bool trainable) {
  Shape shape(r.dims.begin(), r.dims.end());
  Reader rd(r.payload);
  auto v = rd.get_array<float>(shape_size(shape));
  if (!rd.done()) throw FormatError("bad payload size in '" + r.path + "'");
  return trainable ? Tensor::param(std::move(shape), std::move(v))
                   : Tensor::from(std::move(shape), std::move(v));
}

Record slot_record(const std::string& path, const LinearSlot& slot) {
  if (const auto* f = std::get_if<FullLinear>(&slot)) return fp_record(path, f->weight);
  Record r;
  r.path = path;
  r.dims = {slot_rows(slot), slot_cols(slot)};
  Writer w(r.payload);
  if (const auto* q = std::get_if<QuantLinear>(&slot)) {
    r.type = RecordType::RelaxedQuant;
    r.group_size = static_cast<std::uint32_t>(q->group_size);
    w.put<std::uint8_t>(q->frozen ? 1 : 0);
    for (const Tensor* t : {&q->weight, &q->group, &q->scale0, &q->offset0, &q->scale1, &q->offset1})
      w.put_array<float>(t->data());
    return r;
  }
  const auto& p = std::get<PackedLayer>(slot);
  r.type = RecordType::PackedQuant;
  r.group_size = static_cast<std::uint32_t>(p.group_size);
  w.put_array<std::uint64_t>(p.weight_bits);
  w.put_array<std::uint64_t>(p.bitmap_bits);
  for (const auto* v : {&p.scale0, &p.offset0, &p.scale1, &p.offset1})
    w.put_array<std::uint16_t>(*v);
  return r;
}

LinearSlot slot_from(const Record& r) {
  if (r.type == RecordType::FpWeights) return FullLinear{fp_tensor(r, true)};
  if (r.dims.size() != 2) throw FormatError("linear record '" + r.path + "' must be rank 2");
  const std::size_t rows = r.dims[0], cols = r.dims[1], gs = r.group_size;
  if (gs == 0) throw FormatError("zero group size in '" + r.path + "'");
  const std::size_t ch = rows * ((cols + gs - 1) / gs), n = rows * cols;
  Reader rd(r.payload);
  if (r.type == RecordType::RelaxedQuant) {
    const bool frozen = rd.get<std::uint8_t>() != 0;
    auto w = rd.get_array<float>(n);
    auto g = rd.get_array<float>(n);
    auto s0 = rd.get_array<float>(ch), o0 = rd.get_array<float>(ch);
    auto s1 = rd.get_array<float>(ch), o1 = rd.get_array<float>(ch);
    if (!rd.done()) throw FormatError("bad payload size in '" + r.path + "'");
    QuantLinear q = QuantLinear::create(rows, cols, gs, std::move(w), std::move(g), std::move(s0),
                                        std::move(o0), std::move(s1), std::move(o1));
    if (frozen) {
      q.weight = q.weight.detach();
      q.group = q.group.detach();
      q.frozen = true;
    }
    return q;
  }
  if (r.type != RecordType::PackedQuant) throw FormatError("'" + r.path + "' is not a linear record");
  const std::size_t words = (n + 63) / 64;
  auto wb = rd.get_array<std::uint64_t>(words);
  auto gb = rd.get_array<std::uint64_t>(words);
  auto s0 = rd.get_array<std::uint16_t>(ch), o0 = rd.get_array<std::uint16_t>(ch);
  auto s1 = rd.get_array<std::uint16_t>(ch), o1 = rd.get_array<std::uint16_t>(ch);
  if (!rd.done()) throw FormatError("bad payload size in '" + r.path + "'");
  return PackedLayer::from_storage(rows, cols, gs, std::move(wb), std::move(gb), std::move(s0),
                                   std::move(o0), std::move(s1), std::move(o1));
}

Record act_record(const std::string& path, const ActQuantParams& p) {
  Record r;
  r.type = RecordType::ActParams;
  r.path = path;
  Writer w(r.payload);
  for (const Tensor* t : {&p.knee, &p.knee_gap, &p.clip_max, &p.clip_min}) w.put<float>(t->item());
  for (int b : p.bits) w.put<std::uint32_t>(static_cast<std::uint32_t>(b));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.total_bits));
  w.put<float>(p.tau_scale);
  return r;
}

ActQuantParams act_from(const Record& r) {
  Reader rd(r.payload);
  ActQuantParams p;
  p.knee = Tensor::param({}, rd.get<float>());
  p.knee_gap = Tensor::param({}, rd.get<float>());
  p.clip_max = Tensor::param({}, rd.get<float>());
  p.clip_min = Tensor::param({}, rd.get<float>());
  for (int& b : p.bits) b = static_cast<int>(rd.get<std::uint32_t>());
  p.total_bits = static_cast<int>(rd.get<std::uint32_t>());
  p.tau_scale = rd.get<float>();
  if (!rd.done()) throw FormatError("bad payload size in '" + r.path + "'");
  p.validate();
  return p;
}

std::string format_float(float v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

Meta with_model_meta(const Model& m, const Meta& meta) {
  Meta out{{"vocab_size", std::to_string(m.cfg.vocab_size)},
           {"d_model", std::to_string(m.cfg.d_model)},
           {"n_heads", std::to_string(m.cfg.n_heads)},
           {"n_layers", std::to_string(m.cfg.n_layers)},
           {"d_ff", std::to_string(m.cfg.d_ff)},
           {"max_seq_len", std::to_string(m.cfg.max_seq_len)},
           {"rms_norm_eps", format_float(m.cfg.rms_norm_eps)}};
  out.insert(out.end(), meta.begin(), meta.end());
  return out;
}

std::size_t meta_size(const Meta& meta, const std::string& key) {
  const std::string v = meta_get(meta, key);
  if (v.empty()) throw FormatError("checkpoint metadata lacks '" + key + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw FormatError("bad metadata value for '" + key + "'");
  }
}

}  // namespace

std::vector<Record> model_records(const Model& model, const Meta& meta) {
  std::vector<Record> recs;
  Record cfg;
  cfg.type = RecordType::Config;
  cfg.path = "meta";
  std::string text;
  for (const auto& [k, v] : with_model_meta(model, meta)) text += k + "=" + v + "\n";
  cfg.payload.assign(text.begin(), text.end());
  recs.push_back(std::move(cfg));
  recs.push_back(fp_record("embed.tok", model.tok_emb));
  recs.push_back(fp_record("embed.pos", model.pos_emb));
  recs.push_back(fp_record("final_norm", model.final_norm));
  recs.push_back(fp_record("lm_head", model.lm_head));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& L = model.layers[l];
    const std::string base = "layers." + std::to_string(l) + ".";
    recs.push_back(fp_record(base + "norm1", L.norm1));
    recs.push_back(fp_record(base + "norm2", L.norm2));
    const auto slots = L.slots();
    for (std::size_t s = 0; s < slots.size(); ++s)
      recs.push_back(slot_record(base + DecoderLayer::slot_names()[s], *slots[s]));
    if (L.acts)
      for (std::size_t i = 0; i < kSiteCount; ++i)
        recs.push_back(act_record(base + "act." + site_name(Site(i)), (*L.acts)[i]));
  }
  return recs;
}

Checkpoint model_from_records(const std::vector<Record>& records) {
  if (records.empty() || records[0].type != RecordType::Config)
    throw FormatError("checkpoint must start with a config record");
  Checkpoint ck;
  {
    std::istringstream in(std::string(records[0].payload.begin(), records[0].payload.end()));
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("bad metadata line");
      ck.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
  }
  ModelConfig cfg;
  cfg.vocab_size = meta_size(ck.meta, "vocab_size");
  cfg.d_model = meta_size(ck.meta, "d_model");
  cfg.n_heads = meta_size(ck.meta, "n_heads");
  cfg.n_layers = meta_size(ck.meta, "n_layers");
  cfg.d_ff = meta_size(ck.meta, "d_ff");
  cfg.max_seq_len = meta_size(ck.meta, "max_seq_len");
  cfg.rms_norm_eps = std::stof(meta_get(ck.meta, "rms_norm_eps", "1e-5"));
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint model config: ") + e.what());
  }
  // Strip the model keys so the caller sees only its own metadata.
  std::erase_if(ck.meta, [](const auto& kv) {
    static const char* keys[] = {"vocab_size", "d_model", "n_heads", "n_layers",
                                 "d_ff", "max_seq_len", "rms_norm_eps"};
    for (const char* k : keys)
      if (kv.first == k) return true;
    return false;
  });

  Model& m = ck.model;
  m.cfg = cfg;
  m.layers.resize(cfg.n_layers);
  std::vector<std::array<std::optional<ActQuantParams>, kSiteCount>> sites(cfg.n_layers);
  std::vector<int> filled(cfg.n_layers, 0);
  for (std::size_t i = 1; i < records.size(); ++i) {
    const Record& r = records[i];
    if (r.path == "embed.tok") m.tok_emb = fp_tensor(r, true);
    else if (r.path == "embed.pos") m.pos_emb = fp_tensor(r, true);
    else if (r.path == "final_norm") m.final_norm = fp_tensor(r, true);
    else if (r.path == "lm_head") m.lm_head = fp_tensor(r, true);
    else if (r.path.rfind("layers.", 0) == 0) {
      const auto dot = r.path.find('.', 7);
      if (dot == std::string::npos) throw FormatError("bad record path '" + r.path + "'");
      const std::size_t l = std::stoull(r.path.substr(7, dot - 7));
      if (l >= cfg.n_layers) throw FormatError("layer index out of range in '" + r.path + "'");
      const std::string leaf = r.path.substr(dot + 1);
      DecoderLayer& L = m.layers[l];
      if (leaf == "norm1") L.norm1 = fp_tensor(r, true);
      else if (leaf == "norm2") L.norm2 = fp_tensor(r, true);
      else if (leaf.rfind("act.", 0) == 0) {
        bool found = false;
        for (std::size_t s = 0; s < kSiteCount; ++s)
          if (leaf.substr(4) == site_name(Site(s))) sites[l][s] = act_from(r), found = true;
        if (!found) throw FormatError("unknown activation site in '" + r.path + "'");
      } else {
        const auto& names = DecoderLayer::slot_names();
        auto slots = L.slots();
        bool found = false;
        for (std::size_t s = 0; s < names.size(); ++s)
          if (leaf == names[s]) *slots[s] = slot_from(r), ++filled[l], found = true;
        if (!found) throw FormatError("unknown record '" + r.path + "'");
      }
    } else {
      throw FormatError("unknown record '" + r.path + "'");
    }
  }
  if (!m.tok_emb.defined() || !m.pos_emb.defined() || !m.final_norm.defined() || !m.lm_head.defined())
    throw FormatError("checkpoint is missing embedding or head records");
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (filled[l] != 7 || !m.layers[l].norm1.defined() || !m.layers[l].norm2.defined())
      throw FormatError("checkpoint layer " + std::to_string(l) + " is incomplete");
    int have = 0;
    for (const auto& s : sites[l]) have += s.has_value();
    if (have == 0) continue;
    if (have != int(kSiteCount)) throw FormatError("partial activation sites in layer " + std::to_string(l));
    ActSites a;
    for (std::size_t s = 0; s < kSiteCount; ++s) a[s] = std::move(*sites[l][s]);
    m.layers[l].acts = std::move(a);
  }
  return ck;
}

void save_checkpoint(const Model& model, const Meta& meta, const std::string& path) {
  write_file(path, serialize_records(model_records(model, meta)));
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  return model_from_records(parse_records(bytes));
}

}  // namespace lbq
