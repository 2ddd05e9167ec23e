#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ctnmt/trainer.hpp"

namespace ctnmt {

// Axes of an ablation grid. An empty axis keeps the base configuration's value.
struct GridAxes {
  std::vector<std::string> strategies;
  std::vector<std::size_t> train_pairs;
  std::vector<std::string> lm_regimes;
  std::vector<int> teacher_layers;
  std::vector<std::uint64_t> seeds;
};

struct GridConfig {
  Json base = Json::object();
  GridAxes axes;
  std::string out;
  std::size_t workers = 1;
  std::uint64_t teacher_seed = 1;
  std::string eval_split = "test";
};

struct GridCell {
  std::string strategy;
  std::size_t train_pairs = 0;
  std::string lm_regime;
  int teacher_layer = -1;

  std::string label() const {
    std::ostringstream s;
    s << strategy << "/n=" << train_pairs << "/lm=" << lm_regime << "/layer=" << teacher_layer;
    return s.str();
  }
};

struct RunResult {
  std::size_t cell = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double bleu = 0.0;        // on the evaluation split, best-validation checkpoint
  double valid_bleu = 0.0;  // best validation BLEU
  double final_valid_bleu = 0.0;
  std::optional<double> teacher_drift;  // final teacher-vs-snapshot MSE
  std::optional<double> student_gap;
  double seconds = 0.0;
};

struct CellSummary {
  GridCell cell;
  std::size_t runs = 0;
  std::size_t failures = 0;
  double bleu_mean = 0.0, bleu_min = 0.0, bleu_max = 0.0;
  double valid_mean = 0.0;
  std::optional<double> drift_mean;
};

struct GridResult {
  std::vector<GridCell> cells;
  std::vector<RunResult> runs;
  std::vector<CellSummary> summaries;
  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(runs.begin(), runs.end(), [](const RunResult& r) { return !r.ok; }));
  }
  const CellSummary& summary(const std::string& strategy, std::size_t train_pairs, const std::string& regime,
                             int layer) const {
    for (const auto& s : summaries) {
      if (s.cell.strategy == strategy && s.cell.train_pairs == train_pairs && s.cell.lm_regime == regime &&
          s.cell.teacher_layer == layer) {
        return s;
      }
    }
    throw std::out_of_range("no grid cell " + strategy);
  }
};

inline GridConfig grid_from_json(const Json& j) {
  GridConfig g;
  detail::Section root(j, "");
  if (const auto* b = root.sub("base")) g.base = *b;
  if (const auto* a = root.sub("axes")) {
    detail::Section axes(*a, "axes");
    axes.get("strategy", g.axes.strategies).get("train_pairs", g.axes.train_pairs)
        .get("lm_regime", g.axes.lm_regimes).get("teacher_tap_layer", g.axes.teacher_layers)
        .get("seed", g.axes.seeds);
    axes.finish();
  }
  root.get("out", g.out).get("workers", g.workers).get("teacher_seed", g.teacher_seed).get("eval_split", g.eval_split);
  root.finish();
  if (g.workers == 0) throw ConfigError("workers must be >= 1");
  if (g.eval_split != "test" && g.eval_split != "valid") throw ConfigError("eval_split must be test or valid");
  return g;
}

namespace detail {

inline Json cell_config_json(const GridConfig& g, const GridCell& c, std::uint64_t seed) {
  Json j = g.base;
  j["fusion"]["strategy"] = c.strategy;
  j["fusion"]["lm_regime"] = c.lm_regime;
  j["fusion"]["teacher_tap_layer"] = c.teacher_layer;
  j["task"]["train_pairs"] = c.train_pairs;
  j["seed"] = seed;
  return j;
}

inline std::string fixed(double v, int digits = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace detail

inline std::vector<GridCell> expand_grid(const GridConfig& g) {
  const auto base = config_from_json(g.base);
  auto strategies = g.axes.strategies.empty() ? std::vector<std::string>{strategy_string(base.fusion)} : g.axes.strategies;
  auto sizes = g.axes.train_pairs.empty() ? std::vector<std::size_t>{base.task.train_pairs} : g.axes.train_pairs;
  auto regimes = g.axes.lm_regimes.empty() ? std::vector<std::string>{to_string(base.fusion.lm_regime)} : g.axes.lm_regimes;
  auto layers = g.axes.teacher_layers.empty() ? std::vector<int>{base.fusion.teacher_tap_layer} : g.axes.teacher_layers;
  std::vector<GridCell> cells;
  for (const auto& n : sizes) {
    for (const auto& s : strategies) {
      for (const auto& r : regimes) {
        for (int l : layers) cells.push_back({s, n, r, l});
      }
    }
  }
  return cells;
}

// Pretrained teachers shared by the cells of one grid, keyed by their configuration.
class TeacherCache {
 public:
  const TeacherLm<float>& get(const ExperimentConfig& cfg, const PreparedData& data, std::uint64_t seed,
                              std::size_t mono_sentences, std::ostream* progress) {
    TaskConfig task = cfg.task;
    if (task.mono_sentences == 0) task.mono_sentences = mono_sentences;
    Json key_json = config_to_json(cfg)["teacher"];
    key_json["task"] = config_to_json(cfg)["task"];
    key_json["task"].erase("train_pairs");
    key_json["task"]["mono_sentences"] = task.mono_sentences;
    key_json["seed"] = seed;
    const auto key = key_json.dump();
    std::lock_guard lock(mutex_);
    auto it = teachers_.find(key);
    if (it != teachers_.end()) return *it->second;
    auto mono = prepare_mono(task, data.src_vocab);
    auto teacher = std::make_shared<TeacherLm<float>>(teacher_config_for(cfg, data.src_vocab), seed);
    auto report = pretrain_teacher(*teacher, mono, mix_seed(seed, 0x7EAC));
    if (progress) {
      *progress << "teacher pretrained: " << mono.size() << " sentences, loss " << detail::fixed(report.final_loss, 3)
                << ", masked accuracy " << detail::fixed(report.masked_accuracy, 3) << '\n';
    }
    reports_[key] = report;
    return *teachers_.emplace(key, std::move(teacher)).first->second;
  }

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<TeacherLm<float>>> teachers_;
  std::map<std::string, PretrainReport> reports_;
};

inline std::vector<CellSummary> summarize(const std::vector<GridCell>& cells, const std::vector<RunResult>& runs) {
  std::vector<CellSummary> out;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    CellSummary s;
    s.cell = cells[c];
    std::vector<double> bleus, valids, drifts;
    for (const auto& r : runs) {
      if (r.cell != c) continue;
      ++s.runs;
      if (!r.ok) {
        ++s.failures;
        continue;
      }
      bleus.push_back(r.bleu);
      valids.push_back(r.valid_bleu);
      if (r.teacher_drift) drifts.push_back(*r.teacher_drift);
    }
    auto mean = [](const std::vector<double>& v) {
      double m = 0.0;
      for (double x : v) m += x;
      return v.empty() ? 0.0 : m / static_cast<double>(v.size());
    };
    if (!bleus.empty()) {
      s.bleu_mean = mean(bleus);
      s.bleu_min = *std::min_element(bleus.begin(), bleus.end());
      s.bleu_max = *std::max_element(bleus.begin(), bleus.end());
      s.valid_mean = mean(valids);
    }
    if (!drifts.empty()) s.drift_mean = mean(drifts);
    out.push_back(s);
  }
  return out;
}

inline void write_results_tsv(std::ostream& out, const std::vector<CellSummary>& rows) {
  out << "strategy\ttrain_pairs\tlm_regime\tteacher_layer\truns\tfailures\tbleu_mean\tbleu_min\tbleu_max\tvalid_"
         "bleu_mean\tteacher_drift_mean\n";
  for (const auto& r : rows) {
    out << r.cell.strategy << '\t' << r.cell.train_pairs << '\t' << r.cell.lm_regime << '\t' << r.cell.teacher_layer
        << '\t' << r.runs << '\t' << r.failures << '\t' << detail::fixed(r.bleu_mean) << '\t'
        << detail::fixed(r.bleu_min) << '\t' << detail::fixed(r.bleu_max) << '\t' << detail::fixed(r.valid_mean)
        << '\t' << (r.drift_mean ? detail::fixed(*r.drift_mean, 6) : "-") << '\n';
  }
}

inline void write_results_table(std::ostream& out, const std::vector<CellSummary>& rows) {
  std::vector<std::vector<std::string>> table{{"strategy", "pairs", "lm rate", "layer", "BLEU", "range", "valid",
                                               "drift", "failed"}};
  for (const auto& r : rows) {
    table.push_back({r.cell.strategy, std::to_string(r.cell.train_pairs), r.cell.lm_regime,
                     r.cell.teacher_layer < 0 ? "2nd-last" : std::to_string(r.cell.teacher_layer),
                     detail::fixed(r.bleu_mean),
                     "[" + detail::fixed(r.bleu_min) + ", " + detail::fixed(r.bleu_max) + "]",
                     detail::fixed(r.valid_mean), r.drift_mean ? detail::fixed(*r.drift_mean, 5) : "-",
                     std::to_string(r.failures) + "/" + std::to_string(r.runs)});
  }
  std::vector<std::size_t> width(table[0].size(), 0);
  for (const auto& row : table) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  for (std::size_t k = 0; k < table.size(); ++k) {
    for (std::size_t i = 0; i < table[k].size(); ++i) {
      out << std::left << std::setw(static_cast<int>(width[i] + 2)) << table[k][i];
    }
    out << '\n';
    if (k == 0) out << std::string(std::accumulate(width.begin(), width.end(), std::size_t{0}) + 2 * width.size(), '-') << '\n';
  }
}

// Runs every (cell, seed) pair, optionally on several worker threads. Failed runs are
// recorded and the grid continues.
inline GridResult run_grid(const GridConfig& g, std::ostream* progress = nullptr, TeacherCache* shared_cache = nullptr) {
  GridResult result;
  result.cells = expand_grid(g);
  auto seeds = g.axes.seeds.empty() ? std::vector<std::uint64_t>{config_from_json(g.base).seed} : g.axes.seeds;
  std::size_t max_pairs = 0;
  for (const auto& c : result.cells) max_pairs = std::max(max_pairs, c.train_pairs);

  struct Job {
    std::size_t cell;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < result.cells.size(); ++c) {
    for (auto s : seeds) jobs.push_back({c, s});
  }
  result.runs.resize(jobs.size());

  TeacherCache local_cache;
  TeacherCache& cache = shared_cache ? *shared_cache : local_cache;
  std::mutex data_mutex, log_mutex;
  std::map<std::size_t, std::shared_ptr<PreparedData>> data_by_size;
  auto data_for = [&](const ExperimentConfig& cfg) {
    std::lock_guard lock(data_mutex);
    auto& slot = data_by_size[cfg.task.train_pairs];
    if (!slot) slot = std::make_shared<PreparedData>(prepare_data(cfg.task));
    return slot;
  };

  auto run_one = [&](std::size_t index) {
    const auto& job = jobs[index];
    RunResult r;
    r.cell = job.cell;
    r.seed = job.seed;
    const auto start = std::chrono::steady_clock::now();
    try {
      auto cfg = config_from_json(detail::cell_config_json(g, result.cells[job.cell], job.seed));
      auto data = data_for(cfg);
      const TeacherLm<float>* teacher = nullptr;
      if (cfg.fusion.needs_teacher()) teacher = &cache.get(cfg, *data, g.teacher_seed, 10 * max_pairs, progress);
      std::string dir;
      MetricsLog log;
      if (!g.out.empty()) {
        dir = g.out + "/cell" + std::to_string(job.cell) + "_seed" + std::to_string(job.seed);
        std::filesystem::create_directories(dir);
        std::filesystem::remove(dir + "/metrics.jsonl");
        log = MetricsLog(dir + "/metrics.jsonl");
      }
      Trainer trainer(cfg, *data, teacher);
      trainer.run(log, dir);
      r.final_valid_bleu = trainer.validation_bleu();
      if (auto d = trainer.drift()) {
        r.teacher_drift = d->teacher_shift;
        r.student_gap = d->student_gap;
      }
      if (trainer.best_state()) trainer.restore(*trainer.best_state());
      r.valid_bleu = trainer.best_bleu();
      const auto& split = g.eval_split == "test" ? data->test : data->valid;
      r.bleu = trainer.bleu_on(split, cfg.decode.beam);
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (progress) {
      std::lock_guard lock(log_mutex);
      *progress << result.cells[job.cell].label() << " seed " << job.seed << ": "
                << (r.ok ? "BLEU " + detail::fixed(r.bleu) : "FAILED " + r.error) << " (" << detail::fixed(r.seconds, 1)
                << "s)" << std::endl;
    }
    result.runs[index] = r;
  };

  const std::size_t workers = std::min(g.workers, jobs.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) run_one(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  result.summaries = summarize(result.cells, result.runs);
  if (!g.out.empty()) {
    std::filesystem::create_directories(g.out);
    std::ofstream tsv(g.out + "/results.tsv");
    write_results_tsv(tsv, result.summaries);
    std::ofstream txt(g.out + "/results.txt");
    write_results_table(txt, result.summaries);
    std::ofstream runs(g.out + "/runs.tsv");
    runs << "cell\tseed\tok\tbleu\tvalid_bleu\tteacher_drift\tseconds\terror\n";
    for (const auto& r : result.runs) {
      runs << r.cell << '\t' << r.seed << '\t' << r.ok << '\t' << detail::fixed(r.bleu) << '\t'
           << detail::fixed(r.valid_bleu) << '\t' << (r.teacher_drift ? detail::fixed(*r.teacher_drift, 6) : "-")
           << '\t' << detail::fixed(r.seconds, 1) << '\t' << r.error << '\n';
    }
  }
  return result;
}

}  // namespace ctnmt
