#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ponder::benchdata {

enum class Task { noisy_majority, prefix_parity, pattern_depth };

Task task_from_string(const std::string& s);
std::string task_to_string(Task t);

struct TaskSpec {
  Task task = Task::pattern_depth;
  int vocab_size = 32;
  int seq_len = 32;
  int num_classes = 2;
  int difficulty_levels = 4;
  int train_examples = 4096;
  int dev_examples = 512;
  int test_examples = 512;
  uint64_t seed = 0;

  void validate() const;
};

struct Example {
  std::vector<int> tokens;
  int label = 0;
  int difficulty = 0;
};

struct Dataset {
  std::vector<Example> train, dev, test;
};

// Deterministic given the spec; every (split, difficulty stratum) is
// label-balanced by construction.
Dataset generate(const TaskSpec& spec);

void save_split(const std::string& path, const std::vector<Example>& split);
std::vector<Example> load_split(const std::string& path);

void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

std::string taskspec_to_json(const TaskSpec& spec);
TaskSpec taskspec_from_json_text(const std::string& text);
TaskSpec taskspec_from_file(const std::string& path);

}  // namespace ponder::benchdata
