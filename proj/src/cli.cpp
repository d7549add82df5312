#include "fktlab/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "fktlab/errors.hpp"
#include "fktlab/format.hpp"

namespace fktlab {

namespace {

struct Entry {
  std::string value;
  std::size_t line = 0;
  bool used = false;
};

struct Section {
  std::string name;  // "" for the top level
  std::size_t line = 0;
  std::map<std::string, Entry> entries;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((s[i] == '#' || s[i] == ';') && (i == 0 || s[i - 1] == ' ' || s[i - 1] == '\t')) return s.substr(0, i);
  }
  return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

class Reader {
 public:
  Reader(const std::string& text, std::string origin) : origin_(std::move(origin)) {
    sections_.push_back({"", 0, {}});
    std::istringstream in(text);
    std::string raw;
    std::size_t n = 0;
    while (std::getline(in, raw)) {
      ++n;
      const std::string line = trim(strip_comment(raw));
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') fail(n, "unterminated section header");
        std::string name = trim(line.substr(1, line.size() - 2));
        if (name.empty()) fail(n, "empty section name");
        for (const auto& s : sections_) {
          if (s.name == name) fail(n, "section [" + name + "] appears twice");
        }
        sections_.push_back({name, n, {}});
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail(n, "expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) fail(n, "missing key before '='");
      auto& entries = sections_.back().entries;
      if (entries.contains(key)) fail(n, "key '" + key + "' is set twice");
      entries[key] = {trim(line.substr(eq + 1)), n, false};
    }
    last_line_ = n;
  }

  [[noreturn]] void fail(std::size_t line, const std::string& msg) const {
    throw ConfigError(origin_ + ":" + std::to_string(line) + ": " + msg);
  }

  Section* section(const std::string& name) {
    for (auto& s : sections_) {
      if (s.name == name) return &s;
    }
    return nullptr;
  }

  std::vector<Section*> sections_with_prefix(const std::string& prefix) {
    std::vector<Section*> out;
    for (auto& s : sections_) {
      if (s.name.rfind(prefix, 0) == 0) out.push_back(&s);
    }
    return out;
  }

  const Entry* find(Section* s, const std::string& key) {
    if (!s) return nullptr;
    auto it = s->entries.find(key);
    if (it == s->entries.end()) return nullptr;
    it->second.used = true;
    return &it->second;
  }

  const Entry& require(Section* s, const std::string& key, const std::string& section_name) {
    if (const Entry* e = find(s, key)) return *e;
    const std::size_t line = s && s->line > 0 ? s->line : last_line_;
    const std::string where = section_name.empty() ? "" : " in section [" + section_name + "]";
    fail(line, "missing required key '" + key + "'" + where);
  }

  // Every key must have been consumed by some accessor.
  void reject_unknown() const {
    for (const auto& s : sections_) {
      for (const auto& [k, e] : s.entries) {
        if (!e.used) {
          fail(e.line, "unknown key '" + k + "'" + (s.name.empty() ? "" : " in section [" + s.name + "]"));
        }
      }
    }
    for (const auto& s : sections_) {
      static const char* known[] = {"", "sequence", "protocol", "train", "model"};
      if (std::find(std::begin(known), std::end(known), s.name) == std::end(known) &&
          s.name.rfind("task ", 0) != 0) {
        fail(s.line, "unknown section [" + s.name + "]");
      }
    }
  }

  template <class T>
  T number(const Entry& e, const std::string& key) const {
    T v{};
    const char* b = e.value.data();
    const char* end = b + e.value.size();
    auto [p, ec] = std::from_chars(b, end, v);
    if (ec != std::errc{} || p != end) fail(e.line, "key '" + key + "': '" + e.value + "' is not a valid number");
    return v;
  }

  bool boolean(const Entry& e, const std::string& key) const {
    if (e.value == "true" || e.value == "yes" || e.value == "1") return true;
    if (e.value == "false" || e.value == "no" || e.value == "0") return false;
    fail(e.line, "key '" + key + "': '" + e.value + "' is not one of true, false");
  }

  template <class T>
  std::vector<T> list(const Entry& e, const std::string& key) const {
    std::vector<T> out;
    for (const auto& item : split(e.value, ',')) out.push_back(number<T>({item, e.line, true}, key));
    return out;
  }

  // Wraps an enum parser so its error carries the line.
  template <class F>
  auto parse_enum(const Entry& e, const std::string& key, F parse) const {
    try {
      return parse(e.value);
    } catch (const ConfigError& err) {
      fail(e.line, "key '" + key + "': " + err.what());
    }
  }

  std::size_t last_line() const { return last_line_; }

 private:
  std::string origin_;
  std::vector<Section> sections_;
  std::size_t last_line_ = 0;
};

template <class T>
void maybe(Reader& r, Section* s, const std::string& key, T& out) {
  if (const Entry* e = r.find(s, key)) {
    if constexpr (std::is_same_v<T, bool>) {
      out = r.boolean(*e, key);
    } else if constexpr (std::is_same_v<T, std::string>) {
      out = e->value;
    } else {
      out = r.number<T>(*e, key);
    }
  }
}

TaskDescriptor parse_task(Reader& r, Section* s) {
  TaskDescriptor d;
  d.name = trim(s->name.substr(5));
  if (d.name.empty()) r.fail(s->line, "task section needs a name, as in [task first]");
  d.family = d.name;
  maybe(r, s, "family", d.family);
  const Entry& kind = r.require(s, "kind", s->name);

  SynthSpec synth;
  maybe(r, s, "dim", synth.dim);
  maybe(r, s, "classes", synth.classes);
  maybe(r, s, "similarity", synth.similarity);
  maybe(r, s, "noise", synth.noise);
  maybe(r, s, "samples", synth.samples);
  maybe(r, s, "seed", synth.seed);
  maybe(r, s, "anchor_seed", synth.anchor_seed);
  maybe(r, s, "nuisance", synth.nuisance);
  const Entry* test_fraction = r.find(s, "test_fraction");
  if (test_fraction) synth.test_fraction = r.number<double>(*test_fraction, "test_fraction");
  if (const Entry* e = r.find(s, "shape")) synth.shape = r.list<std::size_t>(*e, "shape");

  IdxSource idx;
  const Entry* images = r.find(s, "images");
  const Entry* labels = r.find(s, "labels");
  if (images) idx.images = images->value;
  if (labels) idx.labels = labels->value;
  if (test_fraction) idx.test_fraction = synth.test_fraction;
  auto need_idx = [&] {
    if (!images) r.require(s, "images", s->name);
    if (!labels) r.require(s, "labels", s->name);
  };

  if (kind.value == "synth") {
    d.source = synth;
  } else if (kind.value == "idx") {
    need_idx();
    d.source = idx;
  } else if (kind.value == "permuted") {
    PermutedSource p;
    maybe(r, s, "perm_seed", p.perm_seed);
    if (images || labels) {
      need_idx();
      p.base = idx;
    } else {
      p.base = synth;
    }
    d.source = p;
  } else {
    r.fail(kind.line, "key 'kind': unknown value '" + kind.value + "' (choices: synth, idx, permuted)");
  }
  return d;
}

}  // namespace

const char* to_string(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::two_task:
      return "two_task";
    case ProtocolKind::three_task:
      return "three_task";
    case ProtocolKind::sequence:
      return "sequence";
  }
  return "?";
}

ProtocolKind parse_protocol(const std::string& s) {
  for (auto k : {ProtocolKind::two_task, ProtocolKind::three_task, ProtocolKind::sequence}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown protocol '" + s + "' (choices: two_task, three_task, sequence)");
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
  Reader r(text, origin);
  RunConfig c;
  Section* top = r.section("");
  Section* seq = r.section("sequence");
  Section* proto = r.section("protocol");
  Section* train = r.section("train");
  Section* model = r.section("model");

  const Entry& p = r.require(top, "protocol", "");
  c.protocol = r.parse_enum(p, "protocol", parse_protocol);
  std::string out_dir = c.output_dir.string();
  maybe(r, top, "output_dir", out_dir);
  c.output_dir = out_dir;

  const Entry* trials = r.find(top, "trials");
  const Entry* seeds = r.find(top, "seeds");
  if (seeds) c.seeds = r.list<std::uint64_t>(*seeds, "seeds");
  if (trials) {
    const auto n = r.number<std::size_t>(*trials, "trials");
    if (n == 0) r.fail(trials->line, "key 'trials' must be at least 1");
    if (!seeds) {
      for (std::size_t i = 1; i <= n; ++i) c.seeds.push_back(i);
    } else if (c.seeds.size() != n) {
      r.fail(seeds->line, "key 'seeds' lists " + std::to_string(c.seeds.size()) + " seed(s) but trials = " +
                              std::to_string(n));
    }
  }
  if (c.seeds.empty()) c.seeds = {1};

  // Sequence source: a named preset or explicit [task NAME] sections.
  const Entry* preset = r.find(seq, "preset");
  const auto task_sections = r.sections_with_prefix("task ");
  if (preset && !task_sections.empty()) r.fail(task_sections.front()->line, "[task] sections cannot be combined with a preset");
  if (preset) {
    const auto names = preset_names();
    if (std::find(names.begin(), names.end(), preset->value) == names.end()) {
      std::string choices;
      for (const auto& n : names) choices += (choices.empty() ? "" : ", ") + n;
      r.fail(preset->line, "key 'preset': unknown value '" + preset->value + "' (choices: " + choices + ")");
    }
    c.preset = preset->value;
    maybe(r, seq, "data_seed", c.data_seed);
    c.protocol_cfg = preset_config(make_preset(*c.preset, c.data_seed));
  } else if (task_sections.empty()) {
    r.fail(seq ? seq->line : r.last_line(), "missing required key 'preset' in section [sequence] (or [task NAME] sections)");
  } else {
    c.protocol_cfg.arch.normalize = true;
    for (Section* s : task_sections) c.spec.tasks.push_back(parse_task(r, s));
  }
  if (const Entry* e = r.find(seq, "common_shape")) c.spec.common_shape = r.list<std::size_t>(*e, "common_shape");
  if (const Entry* e = r.find(seq, "tasks")) {
    c.subset = r.list<std::size_t>(*e, "tasks");
    for (auto t : c.subset) {
      if (t == 0) r.fail(e->line, "key 'tasks': positions start at 1");
    }
  }

  switch (c.protocol) {
    case ProtocolKind::two_task:
      c.alpha = r.number<std::size_t>(r.require(proto, "alpha", "protocol"), "alpha");
      c.beta = r.number<std::size_t>(r.require(proto, "beta", "protocol"), "beta");
      break;
    case ProtocolKind::three_task: {
      c.alpha = r.number<std::size_t>(r.require(proto, "alpha", "protocol"), "alpha");
      c.beta = r.number<std::size_t>(r.require(proto, "beta", "protocol"), "beta");
      c.gamma = r.number<std::size_t>(r.require(proto, "gamma", "protocol"), "gamma");
      c.decision = r.parse_enum(r.require(proto, "decision", "protocol"), "decision", parse_three_task_decision);
      break;
    }
    case ProtocolKind::sequence: {
      c.strategy.kind = r.parse_enum(r.require(proto, "strategy", "protocol"), "strategy", parse_strategy);
      if (const Entry* e = r.find(proto, "manual")) {
        // "3: 1; 5: 1 3" -> target 3 shares 1, target 5 shares 1 and 3.
        c.family_manual = false;
        for (const auto& item : split(e->value, ';')) {
          if (item.empty()) continue;
          const auto colon = item.find(':');
          if (colon == std::string::npos) r.fail(e->line, "key 'manual': expected 'target: sources' in '" + item + "'");
          const auto target = r.number<int>({trim(item.substr(0, colon)), e->line, true}, "manual");
          auto& src = c.strategy.manual_plan[TaskId{target}];
          std::istringstream in(item.substr(colon + 1));
          std::string tok;
          while (in >> tok) src.insert(TaskId{r.number<int>({tok, e->line, true}, "manual")});
        }
        try {
          c.strategy.validate();
        } catch (const Error& err) {
          r.fail(e->line, std::string("key 'manual': ") + err.what());
        }
      }
      break;
    }
  }
  maybe(r, proto, "fkt", c.protocol_cfg.fkt);

  TrainConfig& t = c.protocol_cfg.train;
  maybe(r, train, "epochs_train", t.epochs_train);
  maybe(r, train, "epochs_finetune", t.epochs_finetune);
  maybe(r, train, "batch_size", t.batch_size);
  maybe(r, train, "lr_initial", t.lr_initial);
  maybe(r, train, "lr_decay_factor", t.lr_decay_factor);
  maybe(r, train, "lr_floor", t.lr_floor);
  try {
    t.validate();
  } catch (const ParameterError& err) {
    r.fail(train ? train->line : r.last_line(), err.what());
  }

  if (const Entry* e = r.find(model, "hidden")) {
    c.protocol_cfg.arch.hidden = r.list<std::size_t>(*e, "hidden");
    if (c.protocol_cfg.arch.hidden.empty() ||
        std::find(c.protocol_cfg.arch.hidden.begin(), c.protocol_cfg.arch.hidden.end(), 0u) !=
            c.protocol_cfg.arch.hidden.end()) {
      r.fail(e->line, "key 'hidden' needs positive widths");
    }
  }
  maybe(r, model, "normalize", c.protocol_cfg.arch.normalize);
  maybe(r, model, "squared", c.protocol_cfg.squared);
  if (const Entry* e = r.find(model, "prune_fraction")) {
    c.protocol_cfg.prune_fraction = r.number<double>(*e, "prune_fraction");
    if (!(c.protocol_cfg.prune_fraction >= 0.0 && c.protocol_cfg.prune_fraction <= 1.0)) {
      r.fail(e->line, "key 'prune_fraction' must lie in [0, 1]");
    }
  }

  r.reject_unknown();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

TaskSequence build_run_sequence(const RunConfig& cfg) {
  SequenceSpec spec = cfg.preset ? make_preset(*cfg.preset, cfg.data_seed).spec : cfg.spec;
  if (cfg.spec.common_shape) spec.common_shape = cfg.spec.common_shape;
  if (!cfg.subset.empty()) {
    SequenceSpec kept;
    kept.common_shape = spec.common_shape;
    for (auto pos : cfg.subset) {
      if (pos > spec.tasks.size()) {
        throw ConfigError("task position " + std::to_string(pos) + " outside 1.." + std::to_string(spec.tasks.size()));
      }
      kept.tasks.push_back(spec.tasks[pos - 1]);
    }
    spec = std::move(kept);
  }
  return build_sequence(spec);
}

std::vector<ExperimentResult> run_trials(const RunConfig& cfg) {
  const TaskSequence seq = build_run_sequence(cfg);
  SharingStrategy strategy = cfg.strategy;
  if (strategy.kind == StrategyKind::manual && cfg.family_manual) strategy.manual_plan = family_plan(seq.families);
  std::vector<ExperimentResult> out;
  for (auto seed : cfg.seeds) {
    switch (cfg.protocol) {
      case ProtocolKind::two_task:
        out.push_back(run_two_task(seq, cfg.alpha, cfg.beta, cfg.protocol_cfg, seed));
        break;
      case ProtocolKind::three_task:
        out.push_back(run_three_task(seq, cfg.alpha, cfg.beta, cfg.gamma, cfg.decision, cfg.protocol_cfg, seed));
        break;
      case ProtocolKind::sequence:
        out.push_back(run_sequence(seq, strategy, cfg.protocol_cfg, seed));
        break;
    }
  }
  return out;
}

namespace {

struct Row {
  std::string protocol;
  std::optional<std::uint64_t> seed;  // empty on the mean row
  std::vector<TaskId> tasks;
  std::string decision;
  std::vector<std::pair<TaskId, double>> task_acc;
  double mean_acc = 0.0;
  std::optional<double> activation, connectivity, fkt;
};

std::optional<double> mean_of(const std::vector<ExperimentResult>& rs, std::optional<double> ExperimentResult::*field) {
  double sum = 0;
  for (const auto& r : rs) {
    if (!(r.*field)) return std::nullopt;
    sum += *(r.*field);
  }
  return sum / static_cast<double>(rs.size());
}

std::vector<Row> rows_of(const std::vector<ExperimentResult>& rs) {
  std::vector<Row> rows;
  for (const auto& r : rs) {
    rows.push_back({r.protocol, r.seed, r.tasks, r.decision, r.task_acc, r.mean_acc, r.activation, r.connectivity, r.fkt});
  }
  if (rs.empty()) return rows;
  Row m{rs.front().protocol, std::nullopt, rs.front().tasks, rs.front().decision, {}, 0.0, {}, {}, {}};
  for (const auto& [t, a] : rs.front().task_acc) {
    double sum = 0;
    for (const auto& r : rs) {
      auto it = std::find_if(r.task_acc.begin(), r.task_acc.end(), [&](const auto& p) { return p.first == t; });
      if (it == r.task_acc.end()) throw ConsistencyError("trials report different task sets");
      sum += it->second;
    }
    m.task_acc.emplace_back(t, sum / static_cast<double>(rs.size()));
  }
  double sum = 0;
  for (const auto& r : rs) sum += r.mean_acc;
  m.mean_acc = sum / static_cast<double>(rs.size());
  m.activation = mean_of(rs, &ExperimentResult::activation);
  m.connectivity = mean_of(rs, &ExperimentResult::connectivity);
  m.fkt = mean_of(rs, &ExperimentResult::fkt);
  rows.push_back(std::move(m));
  return rows;
}

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << content;
  if (!out) throw IoError("write failed for " + p.string());
}

}  // namespace

std::string results_csv(const std::vector<ExperimentResult>& results) {
  std::string s = std::string(kResultsHeader) + "\n";
  for (const auto& row : rows_of(results)) {
    std::string tasks, acc;
    for (TaskId t : row.tasks) tasks += (tasks.empty() ? "" : ";") + to_string(t);
    for (const auto& [t, a] : row.task_acc) acc += (acc.empty() ? "" : ";") + to_string(t) + ":" + format_double(a);
    s += row.protocol + "," + (row.seed ? std::to_string(*row.seed) : "mean") + "," + tasks + "," + row.decision +
         "," + acc + "," + format_double(row.mean_acc) + "," + opt(row.activation) + "," + opt(row.connectivity) +
         "," + opt(row.fkt) + "\n";
  }
  return s;
}

std::string results_json(const std::vector<ExperimentResult>& results) {
  using json = nlohmann::ordered_json;
  json arr = json::array();
  auto opt_json = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  for (const auto& row : rows_of(results)) {
    json j;
    j["protocol"] = row.protocol;
    j["seed"] = row.seed ? json(*row.seed) : json("mean");
    j["tasks"] = json::array();
    for (TaskId t : row.tasks) j["tasks"].push_back(to_int(t));
    j["decision"] = row.decision;
    j["task_acc"] = json::object();
    for (const auto& [t, a] : row.task_acc) j["task_acc"][to_string(t)] = a;
    j["mean_acc"] = row.mean_acc;
    j["A"] = opt_json(row.activation);
    j["P"] = opt_json(row.connectivity);
    j["FKT"] = opt_json(row.fkt);
    arr.push_back(std::move(j));
  }
  json root;
  root["results"] = std::move(arr);
  json warnings = json::array();
  for (const auto& r : results) {
    for (const auto& w : r.warnings) warnings.push_back("seed " + std::to_string(r.seed) + ": " + w);
  }
  root["warnings"] = std::move(warnings);
  return root.dump(2) + "\n";
}

std::string scores_csv(const std::vector<ExperimentResult>& results) {
  std::size_t pairs = 0;
  for (const auto& r : results) {
    for (const auto& dp : r.decision_points) {
      for (const auto& rep : dp.reports) pairs = std::max(pairs, rep.layer_rho.size());
    }
  }
  std::string s = "protocol,seed,decision," + usefulness_csv_header(pairs) + ",executed\n";
  for (const auto& r : results) {
    for (const auto& dp : r.decision_points) {
      for (const auto& rep : dp.reports) {
        auto it = dp.decisions.find(rep.source);
        const char* executed = it == dp.decisions.end() ? "" : to_string(it->second);
        s += r.protocol + "," + std::to_string(r.seed) + "," + r.decision + "," + usefulness_csv_row(rep, pairs) + "," +
             executed + "\n";
      }
    }
  }
  return s;
}

ReportPaths emit_report(const std::vector<ExperimentResult>& results, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  ReportPaths p{dir / "results.csv", dir / "results.json", dir / "scores.csv"};
  write_file(p.results_csv, results_csv(results));
  write_file(p.results_json, results_json(results));
  write_file(p.scores_csv, scores_csv(results));
  return p;
}

ReportPaths run_config(const std::filesystem::path& path,
                       const std::optional<std::filesystem::path>& output_override) {
  RunConfig cfg = load_config(path);
  if (output_override) cfg.output_dir = *output_override;
  return emit_report(run_trials(cfg), cfg.output_dir);
}

}  // namespace fktlab
