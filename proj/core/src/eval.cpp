#include "microvla/eval.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "microvla/io.hpp"

#ifdef MICROVLA_OPENMP
#include <omp.h>
#endif

namespace microvla {

using nlohmann::json;

std::string ModelPolicy::id() const { return "policy-" + hex_u64(model_->value_hash()); }

PredictResult ExpertPolicy::predict(const Scene& scene, const TaskSpec& task,
                                    const ImageObservation&, const std::string&) {
  const ActionChunk chunk = scripted_expert(scene, task, env_.horizon, env_);
  // Round-trip through the token path so harness results cover the codec.
  const auto tokens = encode_chunk(chunk, codec_);
  PredictResult r;
  try {
    r.chunk = decode_chunk(tokens, codec_);
  } catch (const CodecError& e) {
    r.failure = FormatFailure{e.what(), e.position()};
  }
  return r;
}

void EvalSpec::validate() const {
  if (episodes_per_cell < 1) throw std::invalid_argument("episodes_per_cell must be >= 1");
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (tasks.empty() || seeds.empty()) throw std::invalid_argument("tasks and seeds must be nonempty");
}

std::uint64_t EvalSpec::hash() const {
  KeyValue kv;
  std::string task_names_join, variant_names, seed_list;
  for (auto t : tasks) task_names_join += task_name(t) + ",";
  for (const auto& v : variants) variant_names += v.name() + ",";
  for (auto s : seeds) seed_list += std::to_string(s) + ",";
  kv.set("eval.tasks", task_names_join);
  kv.set("eval.variants", variant_names);
  kv.set("eval.seeds", seed_list);
  kv.set_i64("eval.episodes_per_cell", episodes_per_cell);
  kv.set_i64("eval.max_steps", max_steps);
  return kv.hash();
}

RolloutResult rollout(PolicyLike& policy, Scene scene, const TaskSpec& task,
                      const std::string& instruction, int max_steps, const EnvConfig& env) {
  RolloutResult r;
  while (r.steps_used < max_steps && !success(scene, task)) {
    const ImageObservation obs = render(scene, env);
    const PredictResult pred = policy.predict(scene, task, obs, instruction);
    ++r.predict_calls;
    if (!pred.ok()) {
      ++r.format_failures;
      ++r.steps_used;  // a format failure burns one step as a no-op
      continue;
    }
    for (const ActionVector& a : pred.chunk->actions) {
      scene = step(scene, a, env);
      ++r.steps_used;
      if (success(scene, task) || r.steps_used >= max_steps) break;
    }
  }
  r.success = success(scene, task);
  return r;
}

namespace {

struct EpisodeDraw {
  Scene scene;
  TaskSpec task;
  std::string instruction;
};

EpisodeDraw draw_episode(TaskKind kind, const VariantSpec& variant, std::uint64_t seed,
                         int episode, const EnvConfig& env) {
  Rng rng(derive_seed(seed, "eval-" + task_name(kind) + "-" + variant.name(),
                      static_cast<std::uint64_t>(episode)));
  auto [scene, task] = sample_scene(rng, robot_train_profile(), kind, env);
  EpisodeDraw d;
  d.instruction = canonical_instruction(task);
  apply_variant(scene, d.instruction, variant, rng, env);
  d.scene = std::move(scene);
  d.task = task;
  return d;
}

}  // namespace

SuccessReport eval_suite(PolicyLike& policy, const EvalSpec& spec) {
  spec.validate();
  SuccessReport report;
  report.config_hash = hex_u64(spec.hash());
  report.checkpoint_id = policy.id();
  for (std::uint64_t seed : spec.seeds) {
    for (TaskKind kind : spec.tasks) {
      for (const VariantSpec& variant : spec.variants) {
        CellResult cell;
        cell.task = task_name(kind);
        cell.variant = variant.name();
        cell.seed = seed;
        cell.episodes = spec.episodes_per_cell;
        std::int64_t successes = 0, calls = 0, failures = 0;
#ifdef MICROVLA_OPENMP
#pragma omp parallel for schedule(dynamic, 1) reduction(+ : successes, calls, failures)
#endif
        for (int e = 0; e < spec.episodes_per_cell; ++e) {
          const EpisodeDraw d = draw_episode(kind, variant, seed, e, spec.env);
          const RolloutResult r =
              rollout(policy, d.scene, d.task, d.instruction, spec.max_steps, spec.env);
          successes += r.success ? 1 : 0;
          calls += r.predict_calls;
          failures += r.format_failures;
        }
        cell.successes = static_cast<int>(successes);
        cell.predict_calls = calls;
        cell.format_failures = failures;
        report.cells.push_back(cell);
      }
    }
  }
  return report;
}

double SuccessReport::rate(const std::string& task, const std::string& variant) const {
  double sum = 0;
  int n = 0;
  for (const auto& c : cells) {
    if (c.task == task && c.variant == variant) {
      sum += c.success_rate();
      ++n;
    }
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

double SuccessReport::variant_mean(const std::string& variant) const {
  std::set<std::string> tasks;
  for (const auto& c : cells) tasks.insert(c.task);
  double sum = 0;
  int n = 0;
  for (const auto& t : tasks) {
    const double r = rate(t, variant);
    if (!std::isnan(r)) {
      sum += r;
      ++n;
    }
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

double SuccessReport::ood_aggregate_mean() const {
  std::set<std::string> variants;
  for (const auto& c : cells) {
    if (c.variant != "matching") variants.insert(c.variant);
  }
  double sum = 0;
  int n = 0;
  for (const auto& v : variants) {
    const double r = variant_mean(v);
    if (!std::isnan(r)) {
      sum += r;
      ++n;
    }
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

double SuccessReport::format_failure_rate(const std::string& variant) const {
  std::int64_t calls = 0, failures = 0;
  for (const auto& c : cells) {
    if (c.variant == variant) {
      calls += c.predict_calls;
      failures += c.format_failures;
    }
  }
  return calls ? static_cast<double>(failures) / static_cast<double>(calls) : 0;
}

ParaphraseReport paraphrase_eval(PolicyLike& policy, const EvalSpec& spec) {
  spec.validate();
  ParaphraseReport report;
  report.config_hash = hex_u64(spec.hash());
  report.checkpoint_id = policy.id();
  const VariantSpec matching{VariantKind::Matching, 0};
  for (std::uint64_t seed : spec.seeds) {
    for (TaskKind kind : spec.tasks) {
      std::vector<ParaphrasePair> pairs(static_cast<std::size_t>(spec.episodes_per_cell));
#ifdef MICROVLA_OPENMP
#pragma omp parallel for schedule(dynamic, 1)
#endif
      for (int e = 0; e < spec.episodes_per_cell; ++e) {
        const EpisodeDraw d = draw_episode(kind, matching, seed, e, spec.env);
        Rng para_rng(derive_seed(seed, "paraphrase-" + task_name(kind),
                                 static_cast<std::uint64_t>(e)));
        const std::string para = paraphrase(d.instruction, default_paraphrase_bank(), para_rng,
                                            ParaphraseSplit::Holdout);
        ParaphrasePair pair;
        pair.task = task_name(kind);
        pair.seed = seed;
        pair.episode = e;
        pair.original = d.instruction;
        pair.paraphrased = para;
        pair.orig_success =
            rollout(policy, d.scene, d.task, d.instruction, spec.max_steps, spec.env).success;
        pair.para_success =
            rollout(policy, d.scene, d.task, para, spec.max_steps, spec.env).success;
        pairs[static_cast<std::size_t>(e)] = std::move(pair);
      }
      for (auto& p : pairs) report.pairs.push_back(std::move(p));
    }
  }
  return report;
}

double ParaphraseReport::original_rate(const std::string& task) const {
  double sum = 0;
  int n = 0;
  for (const auto& p : pairs) {
    if (task.empty() || p.task == task) {
      sum += p.orig_success ? 1 : 0;
      ++n;
    }
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

double ParaphraseReport::paraphrased_rate(const std::string& task) const {
  double sum = 0;
  int n = 0;
  for (const auto& p : pairs) {
    if (task.empty() || p.task == task) {
      sum += p.para_success ? 1 : 0;
      ++n;
    }
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

// ---- linear probe ----

ProbeReport linear_probe(EncoderParams& encoder, const std::vector<ClassSample>& data,
                         const ProbeConfig& config) {
  if (data.empty()) throw std::invalid_argument("linear_probe: empty class dataset");
  std::set<int> label_set;
  for (const auto& s : data) label_set.insert(s.label);
  if (label_set.size() < 2) {
    throw std::invalid_argument("linear_probe: degenerate dataset with a single class");
  }
  const int classes = num_classes();
  const int d = 2 * encoder.config.embed_dim;  // pooled features: [mean, max]
  const std::uint64_t before = encoder.value_hash();

  // Frozen features, extracted without touching the encoder.
  std::vector<std::vector<float>> feats(data.size());
#ifdef MICROVLA_OPENMP
#pragma omp parallel for schedule(dynamic, 8)
#endif
  for (std::size_t i = 0; i < data.size(); ++i) {
    feats[i] = pooled_features(encoder, data[i].obs);
  }

  const auto n_train = static_cast<std::size_t>(config.train_fraction * static_cast<double>(data.size()));
  if (n_train == 0 || n_train >= data.size()) {
    throw std::invalid_argument("linear_probe: train fraction leaves an empty split");
  }

  // Standardize on the training split.
  std::vector<double> mean(static_cast<std::size_t>(d), 0), stddev(static_cast<std::size_t>(d), 0);
  for (std::size_t i = 0; i < n_train; ++i) {
    for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += feats[i][static_cast<std::size_t>(j)];
  }
  for (auto& m : mean) m /= static_cast<double>(n_train);
  for (std::size_t i = 0; i < n_train; ++i) {
    for (int j = 0; j < d; ++j) {
      const double diff = feats[i][static_cast<std::size_t>(j)] - mean[static_cast<std::size_t>(j)];
      stddev[static_cast<std::size_t>(j)] += diff * diff;
    }
  }
  for (auto& s : stddev) s = std::sqrt(s / static_cast<double>(n_train)) + 1e-8;

  const auto x_of = [&](std::size_t i, int j) {
    return (static_cast<double>(feats[i][static_cast<std::size_t>(j)]) - mean[static_cast<std::size_t>(j)]) /
           stddev[static_cast<std::size_t>(j)];
  };

  // Full-batch multinomial logistic regression.
  std::vector<double> w(static_cast<std::size_t>(d * classes), 0.0);
  std::vector<double> b(static_cast<std::size_t>(classes), 0.0);
  std::vector<double> gw(w.size()), gb(b.size());
  std::vector<double> logits(static_cast<std::size_t>(classes));
  for (int iter = 0; iter < config.max_iters; ++iter) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < n_train; ++i) {
      for (int c = 0; c < classes; ++c) {
        double z = b[static_cast<std::size_t>(c)];
        for (int j = 0; j < d; ++j) z += x_of(i, j) * w[static_cast<std::size_t>(j * classes + c)];
        logits[static_cast<std::size_t>(c)] = z;
      }
      double mx = logits[0];
      for (int c = 1; c < classes; ++c) mx = std::max(mx, logits[static_cast<std::size_t>(c)]);
      double sum = 0;
      for (int c = 0; c < classes; ++c) {
        logits[static_cast<std::size_t>(c)] = std::exp(logits[static_cast<std::size_t>(c)] - mx);
        sum += logits[static_cast<std::size_t>(c)];
      }
      for (int c = 0; c < classes; ++c) {
        const double p = logits[static_cast<std::size_t>(c)] / sum -
                         (c == data[i].label ? 1.0 : 0.0);
        gb[static_cast<std::size_t>(c)] += p;
        for (int j = 0; j < d; ++j) gw[static_cast<std::size_t>(j * classes + c)] += p * x_of(i, j);
      }
    }
    double gnorm = 0;
    const double invn = 1.0 / static_cast<double>(n_train);
    for (std::size_t k = 0; k < gw.size(); ++k) {
      gw[k] *= invn;
      gnorm += gw[k] * gw[k];
      w[k] -= config.lr * gw[k];
    }
    for (std::size_t k = 0; k < gb.size(); ++k) {
      gb[k] *= invn;
      gnorm += gb[k] * gb[k];
      b[k] -= config.lr * gb[k];
    }
    if (gnorm < config.tol * config.tol) break;
  }

  int correct = 0;
  for (std::size_t i = n_train; i < data.size(); ++i) {
    int best = 0;
    double best_z = -1e300;
    for (int c = 0; c < classes; ++c) {
      double z = b[static_cast<std::size_t>(c)];
      for (int j = 0; j < d; ++j) z += x_of(i, j) * w[static_cast<std::size_t>(j * classes + c)];
      if (z > best_z) {
        best_z = z;
        best = c;
      }
    }
    if (best == data[i].label) ++correct;
  }

  const std::uint64_t after = encoder.value_hash();
  if (before != after) {
    throw std::logic_error("linear_probe mutated encoder parameters");
  }
  ProbeReport r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size() - n_train);
  r.classes = classes;
  r.samples = static_cast<int>(data.size());
  r.encoder_id = hex_u64(before);
  return r;
}

// ---- report files ----

namespace {

json cell_json(const CellResult& c) {
  return json{{"record", "cell"},         {"task", c.task},
              {"variant", c.variant},     {"seed", c.seed},
              {"episodes", c.episodes},   {"successes", c.successes},
              {"predict_calls", c.predict_calls}, {"format_failures", c.format_failures}};
}

CellResult cell_from_json(const json& j) {
  CellResult c;
  c.task = j.at("task").get<std::string>();
  c.variant = j.at("variant").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.episodes = j.at("episodes").get<int>();
  c.successes = j.at("successes").get<int>();
  c.predict_calls = j.at("predict_calls").get<std::int64_t>();
  c.format_failures = j.at("format_failures").get<std::int64_t>();
  return c;
}

std::ofstream open_report(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write report '" + path + "'");
  return f;
}

void write_success_table(const SuccessReport& report, std::ostream& os) {
  std::set<std::string> tasks, variants;
  for (const auto& c : report.cells) {
    tasks.insert(c.task);
    variants.insert(c.variant);
  }
  os << "success rates (mean over seeds), checkpoint " << report.checkpoint_id << "\n\n";
  os << std::left;
  os.width(14);
  os << "task";
  for (const auto& v : variants) {
    os.width(18);
    os << v;
  }
  os << "\n";
  for (const auto& t : tasks) {
    os.width(14);
    os << t;
    for (const auto& v : variants) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.1f", 100.0 * report.rate(t, v));
      os.width(18);
      os << buf;
    }
    os << "\n";
  }
  os << "\n";
  os.width(14);
  os << "mean";
  for (const auto& v : variants) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * report.variant_mean(v));
    os.width(18);
    os << buf;
  }
  os << "\n";
}

}  // namespace

void write_success_report(const SuccessReport& report, const std::string& path,
                          ReportFormat format) {
  auto f = open_report(path);
  switch (format) {
    case ReportFormat::StructuredRecords: {
      f << json{{"record", "header"},
                {"report", "success"},
                {"config_hash", report.config_hash},
                {"checkpoint_id", report.checkpoint_id}}
               .dump()
        << "\n";
      for (const auto& c : report.cells) f << cell_json(c).dump() << "\n";
      break;
    }
    case ReportFormat::TableText:
      write_success_table(report, f);
      break;
    case ReportFormat::PlotData: {
      f << "series,x,y\n";
      std::set<std::string> tasks, variants;
      for (const auto& c : report.cells) {
        tasks.insert(c.task);
        variants.insert(c.variant);
      }
      int x = 0;
      for (const auto& v : variants) {
        for (const auto& t : tasks) {
          f << t << "," << x << "," << report.rate(t, v) << "\n";
        }
        ++x;
      }
      break;
    }
  }
}

SuccessReport read_success_report(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open report '" + path + "'");
  SuccessReport report;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string kind = j.at("record").get<std::string>();
    if (kind == "header") {
      report.config_hash = j.at("config_hash").get<std::string>();
      report.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    } else if (kind == "cell") {
      report.cells.push_back(cell_from_json(j));
    }
  }
  return report;
}

void write_paraphrase_report(const ParaphraseReport& report, const std::string& path,
                             ReportFormat format) {
  auto f = open_report(path);
  switch (format) {
    case ReportFormat::StructuredRecords: {
      f << json{{"record", "header"},
                {"report", "paraphrase"},
                {"config_hash", report.config_hash},
                {"checkpoint_id", report.checkpoint_id}}
               .dump()
        << "\n";
      for (const auto& p : report.pairs) {
        f << json{{"record", "pair"},       {"task", p.task},
                  {"seed", p.seed},         {"episode", p.episode},
                  {"orig_success", p.orig_success}, {"para_success", p.para_success},
                  {"original", p.original}, {"paraphrased", p.paraphrased}}
                 .dump()
          << "\n";
      }
      break;
    }
    case ReportFormat::TableText: {
      std::set<std::string> tasks;
      for (const auto& p : report.pairs) tasks.insert(p.task);
      f << "paraphrase robustness, checkpoint " << report.checkpoint_id << "\n\n";
      f << "task          original   paraphrased\n";
      for (const auto& t : tasks) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%-14s%-11.1f%-11.1f\n", t.c_str(),
                      100.0 * report.original_rate(t), 100.0 * report.paraphrased_rate(t));
        f << buf;
      }
      break;
    }
    case ReportFormat::PlotData: {
      f << "series,x,y\n";
      std::set<std::string> tasks;
      for (const auto& p : report.pairs) tasks.insert(p.task);
      int x = 0;
      for (const auto& t : tasks) {
        f << "original," << x << "," << report.original_rate(t) << "\n";
        f << "paraphrased," << x << "," << report.paraphrased_rate(t) << "\n";
        ++x;
      }
      break;
    }
  }
}

ParaphraseReport read_paraphrase_report(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open report '" + path + "'");
  ParaphraseReport report;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string kind = j.at("record").get<std::string>();
    if (kind == "header") {
      report.config_hash = j.at("config_hash").get<std::string>();
      report.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    } else if (kind == "pair") {
      ParaphrasePair p;
      p.task = j.at("task").get<std::string>();
      p.seed = j.at("seed").get<std::uint64_t>();
      p.episode = j.at("episode").get<int>();
      p.orig_success = j.at("orig_success").get<bool>();
      p.para_success = j.at("para_success").get<bool>();
      p.original = j.at("original").get<std::string>();
      p.paraphrased = j.at("paraphrased").get<std::string>();
      report.pairs.push_back(std::move(p));
    }
  }
  return report;
}

}  // namespace microvla
