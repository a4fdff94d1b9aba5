#include "lbq/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace lbq {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

}  // namespace

ConfigFile ConfigFile::parse(const std::string& text) {
  ConfigFile cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "config line " + std::to_string(lineno);
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + ": unterminated section header");
      const std::string name = trim(t.substr(1, t.size() - 2));
      if (name.empty()) throw ConfigError(where + ": empty section name");
      for (const auto& s : cfg.sections_)
        if (s.first == name) throw ConfigError(where + ": duplicate section [" + name + "]");
      cfg.sections_.push_back({name, {}});
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (cfg.sections_.empty()) throw ConfigError(where + ": key outside of a section");
    const std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    auto& entries = cfg.sections_.back().second;
    for (const auto& e : entries)
      if (e.first == key) throw ConfigError(where + ": duplicate key '" + key + "'");
    entries.push_back({key, value});
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return parse(os.str());
}

std::string ConfigFile::serialize() const {
  std::string out;
  for (const auto& [name, entries] : sections_) {
    if (!out.empty()) out += "\n";
    out += "[" + name + "]\n";
    for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
  }
  return out;
}

std::optional<std::string> ConfigFile::get(const std::string& section, const std::string& key) const {
  for (const auto& [name, entries] : sections_)
    if (name == section)
      for (const auto& [k, v] : entries)
        if (k == key) return v;
  return std::nullopt;
}

void ConfigFile::set(const std::string& section, const std::string& key, const std::string& value) {
  for (auto& [name, entries] : sections_) {
    if (name != section) continue;
    for (auto& [k, v] : entries)
      if (k == key) {
        v = value;
        return;
      }
    entries.push_back({key, value});
    return;
  }
  sections_.push_back({section, {{key, value}}});
}

void ConfigFile::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override '" + assignment + "' is not section.key=value");
  const std::string section = trim(assignment.substr(0, dot));
  const std::string key = trim(assignment.substr(dot + 1, eq - dot - 1));
  if (section.empty() || key.empty()) throw ConfigError("override '" + assignment + "' is incomplete");
  set(section, key, trim(assignment.substr(eq + 1)));
}

ConfigFile default_config() {
  return ConfigFile::parse(R"([run]
out_dir = runs/default
metrics = metrics.jsonl
traces = traces.jsonl
timing = timing.jsonl

[corpus]
source = builtin:mixed
length = 200000
train_fraction = 0.9

[model]
vocab_size = 256
d_model = 64
n_heads = 4
n_layers = 4
d_ff = 192
max_seq_len = 128
rms_norm_eps = 1e-5

[teacher]
steps = 300
batch = 4
seq_len = 128
lr = 3e-3

[ptq]
calib_sequences = 16
group_size = 128
method = em
relaxed = soft
em_iters = 50
em_restarts = 4

[distill]
samples = 256
targets = teacher

[wat]
epochs = 2
batch = 4
lr_weight = 2e-5
lr_group = 2e-2
lr_affine = 1e-4
lr_scale = 1
lr_decay = true
lambda = 0.05
beta_start = 1
beta_end = 0.01

[aar]
epochs = 1
batch = 4
lr_affine = 1e-5
lr_clip = 1e-4
lr_knee = 5e-4
lr_scale = 10
lr_decay = false
kv_quant = true
act_bits = 2,4,2
act_total_bits = 4

[eval]
max_tokens = 16384

[joint]
enabled = true

[ablation]
rtn_branch = true

[bench]
shapes = 4096x4096,11008x4096,4096x11008
reps = 20
tokens = 1
)");
}

ConfigFile merge_with_defaults(const ConfigFile& user) {
  ConfigFile merged = default_config();
  for (const auto& [section, entries] : user.sections()) {
    for (const auto& [k, v] : entries) {
      if (!(section == "run" && k == "seed") && !merged.has(section, k))
        throw ConfigError("unknown config key '" + section + "." + k + "'");
      merged.set(section, k, v);
    }
  }
  return merged;
}

namespace {

class Typed {
 public:
  explicit Typed(const ConfigFile& c) : c_(c) {}
  std::string str(const char* s, const char* k) const {
    auto v = c_.get(s, k);
    if (!v) throw ConfigError(std::string("missing config key '") + s + "." + k + "'");
    return *v;
  }
  std::uint64_t u64(const char* s, const char* k) const {
    const std::string v = str(s, k);
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      const auto x = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return x;
    } catch (const std::exception&) {
      throw ConfigError(std::string("'") + s + "." + k + "' must be a non-negative integer, got '" + v + "'");
    }
  }
  std::size_t size(const char* s, const char* k, std::size_t min = 1) const {
    const auto x = u64(s, k);
    if (x < min)
      throw ConfigError(std::string("'") + s + "." + k + "' must be >= " + std::to_string(min));
    return static_cast<std::size_t>(x);
  }
  double real(const char* s, const char* k) const {
    const std::string v = str(s, k);
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return x;
    } catch (const std::exception&) {
      throw ConfigError(std::string("'") + s + "." + k + "' must be a number, got '" + v + "'");
    }
  }
  bool flag(const char* s, const char* k) const {
    const std::string v = str(s, k);
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError(std::string("'") + s + "." + k + "' must be true or false");
  }

 private:
  const ConfigFile& c_;
};

}  // namespace

std::string PipelineConfig::path(const std::string& file) const {
  if (out_dir.empty()) return file;
  return out_dir.back() == '/' ? out_dir + file : out_dir + "/" + file;
}

PipelineConfig pipeline_config(const ConfigFile& merged) {
  const Typed t(merged);
  PipelineConfig p;
  if (!merged.has("run", "seed"))
    throw ConfigError("run.seed is required (set it in the config, by override, or via LBQ_SEED)");
  p.seed = t.u64("run", "seed");
  p.out_dir = t.str("run", "out_dir");
  p.metrics_file = t.str("run", "metrics");
  p.traces_file = t.str("run", "traces");
  p.timing_file = t.str("run", "timing");

  p.corpus_source = t.str("corpus", "source");
  p.corpus_length = t.size("corpus", "length", 2);
  p.train_fraction = t.real("corpus", "train_fraction");
  if (!(p.train_fraction > 0.0 && p.train_fraction < 1.0))
    throw ConfigError("corpus.train_fraction must lie in (0, 1)");
  if (p.corpus_source.rfind("builtin:", 0) != 0 && !std::ifstream(p.corpus_source))
    throw ConfigError("corpus file '" + p.corpus_source + "' does not exist");

  p.model.vocab_size = t.size("model", "vocab_size");
  p.model.d_model = t.size("model", "d_model");
  p.model.n_heads = t.size("model", "n_heads");
  p.model.n_layers = t.size("model", "n_layers");
  p.model.d_ff = t.size("model", "d_ff");
  p.model.max_seq_len = t.size("model", "max_seq_len");
  p.model.rms_norm_eps = static_cast<float>(t.real("model", "rms_norm_eps"));
  p.model.validate();

  p.teacher.steps = t.size("teacher", "steps", 0);
  p.teacher.batch = t.size("teacher", "batch");
  p.teacher.seq_len = t.size("teacher", "seq_len");
  p.teacher.lr = static_cast<float>(t.real("teacher", "lr"));
  p.teacher.seed = p.seed + 1;
  if (p.teacher.seq_len > p.model.max_seq_len) throw ConfigError("teacher.seq_len exceeds model.max_seq_len");
  if (!(p.teacher.lr > 0.0f)) throw ConfigError("teacher.lr must be > 0");

  p.calib_sequences = t.size("ptq", "calib_sequences");
  p.ptq.group_size = t.size("ptq", "group_size");
  const std::string method = t.str("ptq", "method");
  if (method == "em") p.ptq.method = InitMethod::Em;
  else if (method == "rtn") p.ptq.method = InitMethod::Rtn;
  else throw ConfigError("ptq.method must be em or rtn");
  const std::string relaxed = t.str("ptq", "relaxed");
  if (relaxed == "soft") p.ptq.relaxed = RelaxedInit::Soft;
  else if (relaxed == "hard") p.ptq.relaxed = RelaxedInit::Hard;
  else throw ConfigError("ptq.relaxed must be soft or hard");
  p.ptq.em.max_iters = static_cast<int>(t.size("ptq", "em_iters"));
  p.ptq.em.restarts = static_cast<int>(t.size("ptq", "em_restarts"));
  p.ptq.em.seed = p.seed + 2;

  p.distill_samples = t.size("distill", "samples");
  const std::string targets = t.str("distill", "targets");
  if (targets == "teacher") p.targets = TargetMode::Teacher;
  else if (targets == "shared") p.targets = TargetMode::Shared;
  else throw ConfigError("distill.targets must be teacher or shared");

  p.wat.stage = Stage::Wat;
  p.wat.epochs = static_cast<int>(t.size("wat", "epochs"));
  p.wat.batch = t.size("wat", "batch");
  p.wat.lr.weight = static_cast<float>(t.real("wat", "lr_weight"));
  p.wat.lr.group = static_cast<float>(t.real("wat", "lr_group"));
  p.wat.lr.affine = static_cast<float>(t.real("wat", "lr_affine"));
  p.wat.lr_scale = static_cast<float>(t.real("wat", "lr_scale"));
  p.wat.lr_decay = t.flag("wat", "lr_decay");
  p.wat.lambda = static_cast<float>(t.real("wat", "lambda"));
  p.wat.beta_start = static_cast<float>(t.real("wat", "beta_start"));
  p.wat.beta_end = static_cast<float>(t.real("wat", "beta_end"));
  p.wat.seed = p.seed + 3;
  p.wat.validate();

  p.aar.stage = Stage::Aar;
  p.aar.epochs = static_cast<int>(t.size("aar", "epochs"));
  p.aar.batch = t.size("aar", "batch");
  p.aar.lr.affine = static_cast<float>(t.real("aar", "lr_affine"));
  p.aar.lr.clip = static_cast<float>(t.real("aar", "lr_clip"));
  p.aar.lr.knee = static_cast<float>(t.real("aar", "lr_knee"));
  p.aar.lr_scale = static_cast<float>(t.real("aar", "lr_scale"));
  p.aar.lr_decay = t.flag("aar", "lr_decay");
  p.aar.kv_quant = t.flag("aar", "kv_quant");
  const auto bits = split(t.str("aar", "act_bits"), ',');
  if (bits.size() != 3) throw ConfigError("aar.act_bits needs three comma-separated budgets");
  for (int i = 0; i < 3; ++i) {
    try {
      p.aar.act_bits[i] = std::stoi(bits[i]);
    } catch (const std::exception&) {
      throw ConfigError("aar.act_bits entries must be integers");
    }
  }
  p.aar.act_total_bits = static_cast<int>(t.size("aar", "act_total_bits"));
  p.aar.seed = p.seed + 4;
  p.aar.validate();
  try {
    ActQuantParams::create(0.0f, 1.0f, 1.0f, 1.0f, p.aar.act_bits, p.aar.act_total_bits);
  } catch (const ContractError& e) {
    throw ConfigError(std::string("activation bit budget: ") + e.what());
  }

  p.eval_max_tokens = t.size("eval", "max_tokens", 2);
  p.joint_enabled = t.flag("joint", "enabled");
  p.rtn_branch = t.flag("ablation", "rtn_branch");

  for (const auto& s : split(t.str("bench", "shapes"), ',')) {
    const auto x = s.find('x');
    try {
      if (x == std::string::npos) throw std::invalid_argument("no x");
      const auto n = std::stoull(s.substr(0, x)), m = std::stoull(s.substr(x + 1));
      if (n == 0 || m == 0) throw std::invalid_argument("zero");
      p.bench_shapes.emplace_back(n, m);
    } catch (const std::exception&) {
      throw ConfigError("bench.shapes entries look like 4096x4096, got '" + s + "'");
    }
  }
  p.bench_reps = static_cast<int>(t.size("bench", "reps"));
  p.bench_tokens = t.size("bench", "tokens");
  return p;
}

std::string config_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lbq
