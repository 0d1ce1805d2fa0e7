#include "ponder/benchdata.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "ponder/rng.hpp"

namespace ponder::benchdata {

using nlohmann::json;

Task task_from_string(const std::string& s) {
  if (s == "noisy_majority") return Task::noisy_majority;
  if (s == "prefix_parity") return Task::prefix_parity;
  if (s == "pattern_depth") return Task::pattern_depth;
  throw std::invalid_argument("unknown task: " + s);
}

std::string task_to_string(Task t) {
  switch (t) {
    case Task::noisy_majority: return "noisy_majority";
    case Task::prefix_parity: return "prefix_parity";
    case Task::pattern_depth: return "pattern_depth";
  }
  return "?";
}

void TaskSpec::validate() const {
  if (difficulty_levels < 2) throw std::invalid_argument("TaskSpec: difficulty_levels < 2");
  if (num_classes < 2) throw std::invalid_argument("TaskSpec: num_classes < 2");
  if (seq_len < 2 || vocab_size < 4) throw std::invalid_argument("TaskSpec: degenerate shape");
  if (train_examples < 0 || dev_examples < 0 || test_examples < 0)
    throw std::invalid_argument("TaskSpec: negative split size");
  if (task == Task::prefix_parity && num_classes != 2)
    throw std::invalid_argument("TaskSpec: prefix_parity is a binary task (num_classes must be 2)");
  if (task == Task::pattern_depth) {
    if (seq_len < difficulty_levels + 2)
      throw std::invalid_argument("TaskSpec: pattern_depth needs seq_len >= difficulty_levels + 2");
    if (vocab_size < seq_len + num_classes)
      throw std::invalid_argument(
          "TaskSpec: pattern_depth needs vocab_size >= seq_len + num_classes "
          "(terminal tokens live above the pointer range)");
  }
}

namespace {

// Majority tasks force this fraction of positions to the label's token class.
constexpr double kMajorityFraction = 0.6;
constexpr double kMaxFlipFraction = 0.3;

std::vector<int> random_distinct(int count, int lo, int hi, RngStream& rng) {
  std::vector<int> pool;
  for (int v = lo; v < hi; ++v) pool.push_back(v);
  if (count > static_cast<int>(pool.size()))
    throw std::logic_error("random_distinct: range too small");
  for (int i = 0; i < count; ++i) {
    int j = i + static_cast<int>(rng.next_below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

std::vector<int> make_noisy_majority_tokens(const TaskSpec& spec, int label, RngStream& rng) {
  std::vector<int> tokens(spec.seq_len);
  int majority_count = static_cast<int>(spec.seq_len * kMajorityFraction) + 1;
  majority_count = std::min(majority_count, spec.seq_len);
  std::vector<int> majority_pos = random_distinct(majority_count, 0, spec.seq_len, rng);
  std::vector<char> is_majority(spec.seq_len, 0);
  for (int p : majority_pos) is_majority[p] = 1;
  for (int p = 0; p < spec.seq_len; ++p) {
    if (is_majority[p]) {
      // random token whose class (token % num_classes) equals the label
      int span = spec.vocab_size / spec.num_classes;
      int k = static_cast<int>(rng.next_below(span));
      tokens[p] = k * spec.num_classes + label;
    } else {
      int other;
      do {
        other = static_cast<int>(rng.next_below(spec.vocab_size));
      } while (other % spec.num_classes == label);
      tokens[p] = other;
    }
  }
  return tokens;
}

std::vector<int> make_prefix_parity_tokens(const TaskSpec& spec, int label, int difficulty,
                                           RngStream& rng) {
  // All designated tokens (token id 1) live in a prefix whose length grows
  // with difficulty; the label is the parity of their count.
  int prefix_len = std::min(spec.seq_len, 2 * (difficulty + 1));
  std::vector<int> valid_counts;
  for (int c = 0; c <= prefix_len; ++c)
    if (c % 2 == label) valid_counts.push_back(c);
  int count = valid_counts[rng.next_below(valid_counts.size())];
  std::vector<int> ones = count > 0 ? random_distinct(count, 0, prefix_len, rng) : std::vector<int>{};
  std::vector<char> is_one(spec.seq_len, 0);
  for (int p : ones) is_one[p] = 1;
  std::vector<int> tokens(spec.seq_len);
  for (int p = 0; p < spec.seq_len; ++p) {
    if (is_one[p]) {
      tokens[p] = 1;
    } else {
      int tok;
      do {
        tok = static_cast<int>(rng.next_below(spec.vocab_size));
      } while (tok == 1);
      tokens[p] = tok;
    }
  }
  return tokens;
}

std::vector<int> make_pattern_depth_tokens(const TaskSpec& spec, int label, int difficulty,
                                           RngStream& rng) {
  // Pointer chain starting at position 0 whose length (nesting depth) is the
  // difficulty stratum plus one. Tokens below seq_len are pointers to
  // positions; tokens at or above seq_len are terminals carrying a class.
  int hops = difficulty + 1;
  std::vector<int> chain = random_distinct(hops, 1, spec.seq_len, rng);
  std::vector<int> tokens(spec.seq_len);
  int terminal_span = (spec.vocab_size - spec.seq_len) / spec.num_classes;
  auto random_terminal = [&](int cls) {
    int k = terminal_span > 1 ? static_cast<int>(rng.next_below(terminal_span)) : 0;
    return spec.seq_len + k * spec.num_classes + cls;
  };
  // filler: random terminals so only real chain positions hold pointers
  for (int p = 0; p < spec.seq_len; ++p)
    tokens[p] = random_terminal(static_cast<int>(rng.next_below(spec.num_classes)));
  int at = 0;
  for (int h = 0; h < hops; ++h) {
    tokens[at] = chain[h];  // pointer token: the next position to visit
    at = chain[h];
  }
  tokens[at] = random_terminal(label);
  return tokens;
}

std::string tokens_key(const std::vector<int>& tokens) {
  std::string k;
  for (int t : tokens) {
    k += std::to_string(t);
    k += ',';
  }
  return k;
}

std::vector<Example> generate_split(const TaskSpec& spec, int count, RngStream& rng,
                                    std::set<std::string>& seen) {
  const int D = spec.difficulty_levels;
  const int C = spec.num_classes;
  std::vector<Example> out;
  out.reserve(count);
  // Stratum and label assignment is round-robin, so every (stratum, label)
  // cell is within one example of uniform.
  for (int idx = 0; idx < count; ++idx) {
    Example ex;
    ex.difficulty = idx % D;
    ex.label = (idx / D) % C;
    bool unique = false;
    for (int attempt = 0; attempt < 200 && !unique; ++attempt) {
      switch (spec.task) {
        case Task::noisy_majority:
          ex.tokens = make_noisy_majority_tokens(spec, ex.label, rng);
          break;
        case Task::prefix_parity:
          ex.tokens = make_prefix_parity_tokens(spec, ex.label, ex.difficulty, rng);
          break;
        case Task::pattern_depth:
          ex.tokens = make_pattern_depth_tokens(spec, ex.label, ex.difficulty, rng);
          break;
      }
      unique = seen.insert(tokens_key(ex.tokens)).second;
    }
    if (!unique)
      throw std::runtime_error(
          "generate: cannot keep splits disjoint; the task space is too small for the "
          "requested example counts");
    out.push_back(std::move(ex));
  }
  return out;
}

// Deterministic cyclic label flips for noisy_majority: within each
// (stratum, base-label) group the same fraction moves to the next class, so
// balance is preserved exactly.
void apply_majority_noise(const TaskSpec& spec, std::vector<Example>& split, RngStream& rng) {
  const int D = spec.difficulty_levels;
  const int C = spec.num_classes;
  std::vector<std::vector<size_t>> groups(static_cast<size_t>(D) * C);
  for (size_t i = 0; i < split.size(); ++i)
    groups[static_cast<size_t>(split[i].difficulty) * C + split[i].label].push_back(i);
  for (int d = 0; d < D; ++d) {
    double frac = kMaxFlipFraction * d / (D - 1);  // stratum 0 is noise-free
    for (int l = 0; l < C; ++l) {
      auto& g = groups[static_cast<size_t>(d) * C + l];
      int flips = static_cast<int>(frac * g.size() + 0.5);
      // pick which examples flip, deterministically
      std::vector<int> idx = flips > 0
                                 ? random_distinct(flips, 0, static_cast<int>(g.size()), rng)
                                 : std::vector<int>{};
      for (int k : idx) split[g[k]].label = (l + 1) % C;
    }
  }
}

}  // namespace

Dataset generate(const TaskSpec& spec) {
  spec.validate();
  Dataset ds;
  std::set<std::string> seen;
  RngStream rng_train = RngStream::derive(spec.seed, 1);
  RngStream rng_dev = RngStream::derive(spec.seed, 2);
  RngStream rng_test = RngStream::derive(spec.seed, 3);
  ds.train = generate_split(spec, spec.train_examples, rng_train, seen);
  ds.dev = generate_split(spec, spec.dev_examples, rng_dev, seen);
  ds.test = generate_split(spec, spec.test_examples, rng_test, seen);
  if (spec.task == Task::noisy_majority) {
    apply_majority_noise(spec, ds.train, rng_train);
    apply_majority_noise(spec, ds.dev, rng_dev);
    apply_majority_noise(spec, ds.test, rng_test);
  }
  return ds;
}

void save_split(const std::string& path, const std::vector<Example>& split) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_split: cannot open " + path);
  for (const auto& ex : split) {
    f << ex.difficulty << '\t' << ex.label << '\t';
    for (size_t i = 0; i < ex.tokens.size(); ++i) {
      if (i) f << ' ';
      f << ex.tokens[i];
    }
    f << '\n';
  }
}

std::vector<Example> load_split(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_split: cannot open " + path);
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    Example ex;
    std::string diff_s, label_s;
    if (!std::getline(is, diff_s, '\t') || !std::getline(is, label_s, '\t'))
      throw std::runtime_error("load_split: malformed record at " + path + ":" +
                               std::to_string(lineno));
    try {
      ex.difficulty = std::stoi(diff_s);
      ex.label = std::stoi(label_s);
      int tok;
      while (is >> tok) ex.tokens.push_back(tok);
    } catch (const std::exception&) {
      throw std::runtime_error("load_split: malformed record at " + path + ":" +
                               std::to_string(lineno));
    }
    if (ex.tokens.empty())
      throw std::runtime_error("load_split: record without tokens at " + path + ":" +
                               std::to_string(lineno));
    out.push_back(std::move(ex));
  }
  return out;
}

void save_dataset(const std::string& dir, const Dataset& ds) {
  save_split(dir + "/train.tsv", ds.train);
  save_split(dir + "/dev.tsv", ds.dev);
  save_split(dir + "/test.tsv", ds.test);
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  ds.train = load_split(dir + "/train.tsv");
  ds.dev = load_split(dir + "/dev.tsv");
  ds.test = load_split(dir + "/test.tsv");
  return ds;
}

std::string taskspec_to_json(const TaskSpec& spec) {
  json j{{"task", task_to_string(spec.task)},
         {"vocab_size", spec.vocab_size},
         {"seq_len", spec.seq_len},
         {"num_classes", spec.num_classes},
         {"difficulty_levels", spec.difficulty_levels},
         {"train_examples", spec.train_examples},
         {"dev_examples", spec.dev_examples},
         {"test_examples", spec.test_examples},
         {"seed", spec.seed}};
  return j.dump(2);
}

TaskSpec taskspec_from_json_text(const std::string& text) {
  json j = json::parse(text);
  TaskSpec s;
  s.task = task_from_string(j.at("task"));
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.seq_len = j.value("seq_len", s.seq_len);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.difficulty_levels = j.value("difficulty_levels", s.difficulty_levels);
  s.train_examples = j.value("train_examples", s.train_examples);
  s.dev_examples = j.value("dev_examples", s.dev_examples);
  s.test_examples = j.value("test_examples", s.test_examples);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

TaskSpec taskspec_from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("taskspec: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return taskspec_from_json_text(ss.str());
}

}  // namespace ponder::benchdata
