#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "gbert/adam.hpp"
#include "gbert/checkpoint.hpp"
#include "gbert/config.hpp"
#include "gbert/datagen.hpp"
#include "gbert/error.hpp"
#include "gbert/finetune.hpp"
#include "gbert/gradient_audit.hpp"
#include "gbert/metrics.hpp"
#include "gbert/model.hpp"
#include "gbert/ontology.hpp"
#include "gbert/pretrain.hpp"
#include "gbert/records.hpp"
#include "gbert/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Config-file path plus CLI overrides in the order they were given.
struct ConfigArgs {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
};

/// Registers --config plus one override option per config key, so the file
/// and the flags go through the same parser and validation.
void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config_path, "key = value config file");
  const auto opt = [cmd, &args](const std::string& flag, const std::string& key,
                                const std::string& help) {
    cmd->add_option_function<std::string>(
        flag, [&args, key](const std::string& v) { args.overrides.emplace_back(key, v); }, help);
  };
  opt("--dx-tree", "dx_tree", "diagnosis ontology file");
  opt("--rx-tree", "rx_tree", "medication ontology file");
  opt("--records", "records", "patient records file (jsonl)");
  opt("--split", "split", "split manifest file (json)");
  opt("--checkpoint", "checkpoint", "checkpoint to load (eval/infer/export, resume for train)");
  opt("--out-dir", "out_dir", "directory for all outputs");
  opt("--d0", "d0", "initial ontology embedding dim");
  opt("--gat-heads", "gat_heads", "graph attention heads");
  opt("--hidden", "hidden", "model hidden dim");
  opt("--ffn", "ffn", "encoder feed-forward dim");
  opt("--layers", "layers", "encoder layers");
  opt("--enc-heads", "enc_heads", "encoder attention heads");
  opt("--lr", "lr", "Adam learning rate");
  opt("--mask-rate", "mask_rate", "pre-training mask probability");
  opt("--threshold", "threshold", "prediction probability threshold");
  opt("--pretrain-epochs", "pretrain_epochs", "pre-train epochs per cycle");
  opt("--finetune-epochs", "finetune_epochs", "fine-tune epochs per cycle");
  opt("--cycles", "cycles", "alternating cycles");
  opt("--batch", "batch", "pre-training batch size");
  opt("--seed", "seed", "master rng seed");
  opt("--precision", "precision", "fp64 or fp32");
  const auto flag = [cmd, &args](const std::string& name, const std::string& key,
                                 const std::string& help) {
    cmd->add_flag_callback(
        name, [&args, key] { args.overrides.emplace_back(key, "true"); }, help);
  };
  flag("--no-graph", "no_graph", "replace ontology embedding with a plain leaf table");
  flag("--no-pretrain", "no_pretrain", "skip the pre-training half of every cycle");
  flag("--freeze-encoder", "freeze_encoder", "fine-tune only the recommendation head");
}

gbert::RunConfig resolve_config(const ConfigArgs& args) {
  gbert::RunConfig cfg;
  if (!args.config_path.empty()) {
    gbert::apply_config_file(cfg, args.config_path);
  }
  for (const auto& [key, value] : args.overrides) {
    gbert::apply_key(cfg, key, value);
  }
  gbert::validate_run_config(cfg);
  return cfg;
}

void require_paths(const gbert::RunConfig& cfg,
                   const std::vector<std::pair<std::string, const std::string*>>& needed) {
  for (const auto& [key, value] : needed) {
    if (value->empty()) {
      std::string flag = key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      throw gbert::ValidationError("missing required path: set " + key +
                                   " (flag --" + flag + " or config key)");
    }
  }
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

// ---------------------------------------------------------------------------
// Split manifest
// ---------------------------------------------------------------------------

struct SplitManifest {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

void save_split(const std::string& path, const SplitManifest& m, std::uint64_t seed,
                double r_train, double r_val, double r_test) {
  json j;
  j["seed"] = seed;
  j["ratios"] = {r_train, r_val, r_test};
  j["train"] = m.train;
  j["val"] = m.val;
  j["test"] = m.test;
  std::ofstream out(path);
  if (!out) {
    throw gbert::ValidationError("cannot write split manifest '" + path + "'");
  }
  out << j.dump(2) << '\n';
}

SplitManifest load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw gbert::ValidationError("cannot open split manifest '" + path + "'");
  }
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw gbert::ValidationError("split manifest '" + path + "' is not valid JSON: " + e.what());
  }
  SplitManifest m;
  for (const auto& [field, dst] :
       {std::pair{"train", &m.train}, {"val", &m.val}, {"test", &m.test}}) {
    if (!j.contains(field) || !j[field].is_array()) {
      throw gbert::ValidationError("split manifest missing list '" + std::string(field) + "'");
    }
    for (const auto& pid : j[field]) {
      dst->push_back(pid.get<std::string>());
    }
  }
  return m;
}

/// Records grouped by split role. Single-visit records feed pre-training
/// only; manifest lists select multi-visit records by patient id.
struct PartitionedRecords {
  std::vector<gbert::PatientRecord> singles;
  std::vector<gbert::PatientRecord> train;
  std::vector<gbert::PatientRecord> val;
  std::vector<gbert::PatientRecord> test;
};

PartitionedRecords partition_records(const std::vector<gbert::PatientRecord>& records,
                                     const SplitManifest& manifest) {
  std::map<std::string, const gbert::PatientRecord*> by_pid;
  PartitionedRecords parts;
  std::size_t n_multi = 0;
  for (const auto& r : records) {
    if (by_pid.count(r.pid) != 0) {
      throw gbert::ValidationError("duplicate patient id '" + r.pid + "' in records");
    }
    by_pid[r.pid] = &r;
    if (r.multi_visit()) {
      ++n_multi;
    } else {
      parts.singles.push_back(r);
    }
  }
  std::size_t assigned = 0;
  const auto fill = [&](const std::vector<std::string>& pids,
                        std::vector<gbert::PatientRecord>& dst, const char* role) {
    for (const auto& pid : pids) {
      const auto it = by_pid.find(pid);
      if (it == by_pid.end()) {
        throw gbert::ValidationError("split manifest lists unknown patient '" + pid + "' (" +
                                     role + ")");
      }
      if (!it->second->multi_visit()) {
        throw gbert::ValidationError("split manifest lists single-visit patient '" + pid +
                                     "' (" + role + ")");
      }
      dst.push_back(*it->second);
      ++assigned;
    }
  };
  fill(manifest.train, parts.train, "train");
  fill(manifest.val, parts.val, "val");
  fill(manifest.test, parts.test, "test");
  if (assigned < n_multi) {
    std::cerr << "warning: " << (n_multi - assigned)
              << " multi-visit records are not referenced by the split manifest\n";
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Checkpoint metadata
// ---------------------------------------------------------------------------

template <typename Scalar>
std::map<std::string, std::string> model_extras(const gbert::RunConfig& cfg,
                                                const gbert::GBertModel<Scalar>& model) {
  std::map<std::string, std::string> extras;
  extras["d0"] = std::to_string(cfg.d0);
  extras["gat_heads"] = std::to_string(cfg.gat_heads);
  extras["hidden"] = std::to_string(cfg.hidden);
  extras["ffn"] = std::to_string(cfg.ffn);
  extras["layers"] = std::to_string(cfg.layers);
  extras["enc_heads"] = std::to_string(cfg.enc_heads);
  extras["no_graph"] = cfg.no_graph ? "true" : "false";
  extras["dx_vocab"] = std::to_string(model.vocab(gbert::CodeType::kDiagnosis));
  extras["rx_vocab"] = std::to_string(model.vocab(gbert::CodeType::kMedication));
  extras["seed"] = std::to_string(cfg.seed);
  return extras;
}

template <typename Scalar>
void check_model_extras(const std::map<std::string, std::string>& extras,
                        const gbert::RunConfig& cfg, const gbert::GBertModel<Scalar>& model) {
  const auto expect = [&extras](const std::string& key, const std::string& want,
                                const std::string& what) {
    const auto it = extras.find(key);
    if (it == extras.end()) {
      throw gbert::ValidationError("checkpoint is missing metadata '" + key + "'");
    }
    if (it->second != want) {
      throw gbert::ValidationError(what + ": checkpoint has " + key + "=" + it->second +
                                   ", run expects " + want);
    }
  };
  const std::string vocab_msg = "vocabulary mismatch between checkpoint and corpus";
  expect("dx_vocab", std::to_string(model.vocab(gbert::CodeType::kDiagnosis)), vocab_msg);
  expect("rx_vocab", std::to_string(model.vocab(gbert::CodeType::kMedication)), vocab_msg);
  const std::string dim_msg = "model configuration mismatch";
  expect("d0", std::to_string(cfg.d0), dim_msg);
  expect("gat_heads", std::to_string(cfg.gat_heads), dim_msg);
  expect("hidden", std::to_string(cfg.hidden), dim_msg);
  expect("ffn", std::to_string(cfg.ffn), dim_msg);
  expect("layers", std::to_string(cfg.layers), dim_msg);
  expect("enc_heads", std::to_string(cfg.enc_heads), dim_msg);
  expect("no_graph", cfg.no_graph ? "true" : "false", dim_msg);
}

template <typename Scalar>
typename gbert::GBertModel<Scalar>::Dims make_dims(const gbert::RunConfig& cfg) {
  typename gbert::GBertModel<Scalar>::Dims dims;
  dims.d0 = cfg.d0;
  dims.gat_heads = cfg.gat_heads;
  dims.hidden = cfg.hidden;
  dims.ffn = cfg.ffn;
  dims.layers = cfg.layers;
  dims.enc_heads = cfg.enc_heads;
  dims.no_graph = cfg.no_graph;
  return dims;
}

/// Loaded corpus files; the model is constructed in place by each command
/// (it owns its trees and is deliberately not movable).
struct CorpusFiles {
  gbert::OntologyTree dx;
  gbert::OntologyTree rx;
  std::vector<gbert::PatientRecord> records;
  PartitionedRecords parts;
};

CorpusFiles load_corpus(const gbert::RunConfig& cfg, bool with_split) {
  auto dx = gbert::OntologyTree::load(cfg.dx_tree, gbert::CodeType::kDiagnosis);
  auto rx = gbert::OntologyTree::load(cfg.rx_tree, gbert::CodeType::kMedication);
  auto records = gbert::load_records(cfg.records, dx, rx);
  PartitionedRecords parts;
  if (with_split) {
    parts = partition_records(records, load_split(cfg.split));
  }
  return {std::move(dx), std::move(rx), std::move(records), std::move(parts)};
}

/// CSV sink that can continue an existing file when a run resumes.
class CsvLog {
 public:
  CsvLog(const std::string& path, const std::string& header, bool resume) {
    const bool fresh = !resume || !fs::exists(path) || fs::file_size(path) == 0;
    out_.open(path, resume ? std::ios::app : std::ios::trunc);
    if (!out_) {
      throw gbert::ValidationError("cannot open log file '" + path + "'");
    }
    out_.precision(17);
    if (fresh) {
      out_ << header << '\n';
    }
  }

  template <typename... Ts>
  void row(const Ts&... fields) {
    bool first = true;
    ((out_ << (first ? "" : ","), first = false, out_ << fields), ...);
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateArgs {
  gbert::GeneratorConfig gen;
  double r_train = 0.6;
  double r_val = 0.2;
  double r_test = 0.2;
  std::string out_dir;
  bool force = false;
};

int cmd_generate(const GenerateArgs& args) {
  if (args.out_dir.empty()) {
    throw gbert::ValidationError("generate requires --out-dir");
  }
  if (fs::exists(args.out_dir) && !args.force) {
    throw gbert::ValidationError("output directory '" + args.out_dir +
                                 "' already exists; pass --force to overwrite");
  }
  fs::create_directories(args.out_dir);

  const gbert::Corpus corpus = gbert::generate_corpus(args.gen);
  const gbert::CorpusSplit split = gbert::split_corpus(corpus.records, args.r_train, args.r_val,
                                                       args.r_test, args.gen.seed);

  const std::string dx_path = join(args.out_dir, "dx_onto.txt");
  const std::string rx_path = join(args.out_dir, "rx_onto.txt");
  const std::string rec_path = join(args.out_dir, "records.jsonl");
  const std::string split_path = join(args.out_dir, "split.json");
  corpus.dx_tree.save(dx_path);
  corpus.rx_tree.save(rx_path);
  gbert::save_records(rec_path, corpus.records, corpus.dx_tree, corpus.rx_tree);

  SplitManifest manifest;
  for (const auto& r : split.train) {
    manifest.train.push_back(r.pid);
  }
  for (const auto& r : split.val) {
    manifest.val.push_back(r.pid);
  }
  for (const auto& r : split.test) {
    manifest.test.push_back(r.pid);
  }
  save_split(split_path, manifest, args.gen.seed, args.r_train, args.r_val, args.r_test);

  {
    std::ofstream out(join(args.out_dir, "generator.resolved"));
    out << "n_single = " << args.gen.n_single << '\n'
        << "n_multi = " << args.gen.n_multi << '\n'
        << "dx_leaves = " << args.gen.dx_leaves << '\n'
        << "rx_leaves = " << args.gen.rx_leaves << '\n'
        << "depth = " << args.gen.depth << '\n'
        << "n_clusters = " << args.gen.n_clusters << '\n'
        << "cluster_dx_pool = " << args.gen.cluster_dx_pool << '\n'
        << "cluster_rx_pool = " << args.gen.cluster_rx_pool << '\n'
        << "mean_dx_per_visit = " << args.gen.mean_dx_per_visit << '\n'
        << "mean_rx_per_visit = " << args.gen.mean_rx_per_visit << '\n'
        << "extra_visit_mean = " << args.gen.extra_visit_mean << '\n'
        << "max_visits = " << args.gen.max_visits << '\n'
        << "noise_rate = " << args.gen.noise_rate << '\n'
        << "train_ratio = " << args.r_train << '\n'
        << "val_ratio = " << args.r_val << '\n'
        << "test_ratio = " << args.r_test << '\n'
        << "seed = " << args.gen.seed << '\n';
  }

  // Ready-to-use run config pointing at the generated corpus; out_dir is left
  // for the training run to choose.
  gbert::RunConfig cfg;
  cfg.dx_tree = dx_path;
  cfg.rx_tree = rx_path;
  cfg.records = rec_path;
  cfg.split = split_path;
  cfg.seed = args.gen.seed;
  gbert::save_config(join(args.out_dir, "config.resolved"), cfg);

  std::cout << "generated " << corpus.records.size() << " records ("
            << args.gen.n_single << " single-visit, " << args.gen.n_multi
            << " multi-visit; split " << manifest.train.size() << "/" << manifest.val.size()
            << "/" << manifest.test.size() << ") in " << args.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <typename Scalar>
int cmd_train(const gbert::RunConfig& cfg) {
  require_paths(cfg, {{"dx_tree", &cfg.dx_tree},
                      {"rx_tree", &cfg.rx_tree},
                      {"records", &cfg.records},
                      {"split", &cfg.split},
                      {"out_dir", &cfg.out_dir}});
  auto corpus = load_corpus(cfg, true);
  auto& parts = corpus.parts;
  if (parts.train.empty()) {
    throw gbert::ValidationError("split manifest yields no training patients");
  }
  if (parts.val.empty()) {
    throw gbert::ValidationError("split manifest yields no validation patients");
  }
  gbert::GBertModel<Scalar> model(std::move(corpus.dx), std::move(corpus.rx),
                                  make_dims<Scalar>(cfg));

  gbert::ParamStore<Scalar> store;
  gbert::Rng init_rng(gbert::derive_seed(cfg.seed, "init"));
  model.register_params(store, init_rng);

  typename gbert::Adam<Scalar>::Options adam_opts;
  adam_opts.lr = static_cast<Scalar>(cfg.lr);
  gbert::Adam<Scalar> opt(adam_opts);

  std::size_t completed_cycles = 0;
  double best_val = -1.0;
  std::size_t best_cycle = 0;
  const bool resuming = !cfg.checkpoint.empty();
  if (resuming) {
    const auto extras = gbert::peek_checkpoint_extras(cfg.checkpoint);
    check_model_extras(extras, cfg, model);
    gbert::load_checkpoint(cfg.checkpoint, store, &opt);
    const auto field = [&extras](const char* key) {
      const auto it = extras.find(key);
      if (it == extras.end()) {
        throw gbert::ValidationError(std::string("checkpoint is missing metadata '") + key +
                                     "'; only train-written checkpoints are resumable");
      }
      return it->second;
    };
    completed_cycles = std::stoull(field("completed_cycles"));
    best_val = std::stod(field("best_val_jaccard"));
    best_cycle = std::stoull(field("best_cycle"));
    if (completed_cycles >= cfg.cycles) {
      throw gbert::ValidationError("checkpoint already completed " +
                                   std::to_string(completed_cycles) + " of " +
                                   std::to_string(cfg.cycles) + " cycles");
    }
  }

  fs::create_directories(cfg.out_dir);
  gbert::save_config(join(cfg.out_dir, "config.resolved"), cfg);
  CsvLog pre_log(join(cfg.out_dir, "pretrain_log.csv"), "epoch,L_se_d,L_se_m,L_du,L_pr",
                 resuming);
  CsvLog fine_log(join(cfg.out_dir, "finetune_log.csv"), "epoch,loss", resuming);
  CsvLog cycle_log(join(cfg.out_dir, "cycles.csv"),
                   "cycle,pretrain_loss,finetune_loss,val_jaccard", resuming);

  const auto pool = gbert::pretrain_pool(parts.singles, parts.train);
  if (pool.empty() && !cfg.no_pretrain) {
    throw gbert::ValidationError("pre-training pool is empty");
  }

  gbert::ScheduleOptions sched;
  sched.pretrain_epochs = cfg.pretrain_epochs;
  sched.finetune_epochs = cfg.finetune_epochs;
  sched.cycles = 1;  // one library cycle per derived rng stream, so resumed
                     // runs replay the identical sequence
  sched.mask_rate = cfg.mask_rate;
  sched.batch_size = cfg.batch;
  sched.threshold = cfg.threshold;
  sched.no_pretrain = cfg.no_pretrain;
  sched.freeze_encoder = cfg.freeze_encoder;

  const std::string best_path = join(cfg.out_dir, "checkpoint.bin");
  const std::string last_path = join(cfg.out_dir, "last.bin");
  auto extras = model_extras(cfg, model);

  for (std::size_t cycle = completed_cycles + 1; cycle <= cfg.cycles; ++cycle) {
    gbert::Rng cycle_rng(gbert::derive_seed(cfg.seed, "cycle" + std::to_string(cycle)));
    const auto result = gbert::alternating_schedule(model, store, opt, pool, parts.train,
                                                    parts.val, sched, cycle_rng);
    for (std::size_t e = 0; e < result.pretrain_history.size(); ++e) {
      const auto& s = result.pretrain_history[e];
      pre_log.row((cycle - 1) * cfg.pretrain_epochs + e + 1, s.se_d, s.se_m, s.du, s.total);
    }
    for (std::size_t e = 0; e < result.finetune_history.size(); ++e) {
      fine_log.row((cycle - 1) * cfg.finetune_epochs + e + 1, result.finetune_history[e].loss);
    }
    const auto& cr = result.cycles.front();
    cycle_log.row(cycle, cr.pretrain_loss, cr.finetune_loss, cr.val_jaccard);

    if (cr.val_jaccard > best_val) {
      best_val = cr.val_jaccard;
      best_cycle = cycle;
      auto best_extras = extras;
      best_extras["kind"] = "best";
      best_extras["completed_cycles"] = std::to_string(cycle);
      best_extras["best_cycle"] = std::to_string(best_cycle);
      {
        std::ostringstream v;
        v.precision(17);
        v << best_val;
        best_extras["best_val_jaccard"] = v.str();
      }
      gbert::save_checkpoint<Scalar>(best_path, store, nullptr, best_extras);
    }
    auto last_extras = extras;
    last_extras["kind"] = "last";
    last_extras["completed_cycles"] = std::to_string(cycle);
    last_extras["best_cycle"] = std::to_string(best_cycle);
    {
      std::ostringstream v;
      v.precision(17);
      v << best_val;
      last_extras["best_val_jaccard"] = v.str();
    }
    gbert::save_checkpoint<Scalar>(last_path, store, &opt, last_extras);

    std::cout << "cycle " << cycle << "/" << cfg.cycles << "  pretrain " << cr.pretrain_loss
              << "  finetune " << cr.finetune_loss << "  val_jaccard " << cr.val_jaccard
              << "  (best " << best_val << " @ cycle " << best_cycle << ")\n";
  }
  std::cout << "best checkpoint: " << best_path << "  resume state: " << last_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

template <typename Scalar>
int cmd_eval(const gbert::RunConfig& cfg) {
  require_paths(cfg, {{"dx_tree", &cfg.dx_tree},
                      {"rx_tree", &cfg.rx_tree},
                      {"records", &cfg.records},
                      {"split", &cfg.split},
                      {"checkpoint", &cfg.checkpoint},
                      {"out_dir", &cfg.out_dir}});
  auto corpus = load_corpus(cfg, true);
  if (corpus.parts.test.empty()) {
    throw gbert::ValidationError("split manifest yields no test patients");
  }
  gbert::GBertModel<Scalar> model(std::move(corpus.dx), std::move(corpus.rx),
                                  make_dims<Scalar>(cfg));

  gbert::ParamStore<Scalar> store;
  gbert::Rng init_rng(gbert::derive_seed(cfg.seed, "init"));
  model.register_params(store, init_rng);
  check_model_extras(gbert::peek_checkpoint_extras(cfg.checkpoint), cfg, model);
  gbert::load_checkpoint<Scalar>(cfg.checkpoint, store, nullptr);

  gbert::MetricsReport report =
      gbert::evaluate_records(model, store, corpus.parts.test, cfg.threshold);
  report.config_fingerprint = gbert::config_fingerprint(cfg);
  report.seed = cfg.seed;

  fs::create_directories(cfg.out_dir);
  gbert::save_config(join(cfg.out_dir, "config.resolved"), cfg);
  report.write_json(join(cfg.out_dir, "metrics.json"));
  report.write_csv(join(cfg.out_dir, "metrics.csv"));

  std::cout << "test jaccard " << report.jaccard << "  f1 " << report.f1 << "  pr_auc "
            << report.pr_auc << "  (" << report.n_patients << " patients, " << report.n_visits
            << " visits";
  if (report.n_skipped_no_positives > 0) {
    std::cout << ", " << report.n_skipped_no_positives << " skipped for pr_auc";
  }
  std::cout << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

template <typename Scalar>
int cmd_gradcheck(const gbert::RunConfig& cfg) {
  require_paths(cfg, {{"out_dir", &cfg.out_dir}});
  if constexpr (!std::is_same_v<Scalar, double>) {
    throw gbert::ValidationError(
        "gradcheck requires fp64: finite differences at fp32 are roundoff-dominated "
        "past the 1e-5 tolerance");
  }
  const auto result = gbert::run_gradient_audit<Scalar>(cfg.seed);

  fs::create_directories(cfg.out_dir);
  gbert::save_config(join(cfg.out_dir, "config.resolved"), cfg);
  json j;
  j["h"] = static_cast<double>(result.h);
  j["tol"] = static_cast<double>(result.tol);
  j["pretrain"] = {{"max_rel_err", static_cast<double>(result.pretrain.max_rel_err)},
                   {"worst_param", result.pretrain.worst_param},
                   {"pass", result.pretrain.passes(result.tol)}};
  j["finetune"] = {{"max_rel_err", static_cast<double>(result.finetune.max_rel_err)},
                   {"worst_param", result.finetune.worst_param},
                   {"pass", result.finetune.passes(result.tol)}};
  j["fault_detected"] = result.fault_detected;
  j["seconds"] = result.seconds;
  j["pass"] = result.passed();
  {
    std::ofstream out(join(cfg.out_dir, "gradcheck.json"));
    out << j.dump(2) << '\n';
  }

  std::cout << "masked pre-training loss: max rel err " << result.pretrain.max_rel_err
            << " (worst " << result.pretrain.worst_param << ") -> "
            << (result.pretrain.passes(result.tol) ? "pass" : "FAIL") << "\n";
  std::cout << "recommendation loss:      max rel err " << result.finetune.max_rel_err
            << " (worst " << result.finetune.worst_param << ") -> "
            << (result.finetune.passes(result.tol) ? "pass" : "FAIL") << "\n";
  std::cout << "corrupted-backward probe: " << (result.fault_detected ? "detected" : "MISSED")
            << "\n";
  std::cout << (result.passed() ? "gradcheck passed" : "gradcheck FAILED") << " in "
            << result.seconds << " s\n";
  return result.passed() ? 0 : 1;
}

// ---------------------------------------------------------------------------
// export-embeddings
// ---------------------------------------------------------------------------

template <typename Scalar>
int cmd_export(const gbert::RunConfig& cfg) {
  require_paths(cfg, {{"dx_tree", &cfg.dx_tree},
                      {"rx_tree", &cfg.rx_tree},
                      {"checkpoint", &cfg.checkpoint},
                      {"out_dir", &cfg.out_dir}});
  auto dx = gbert::OntologyTree::load(cfg.dx_tree, gbert::CodeType::kDiagnosis);
  auto rx = gbert::OntologyTree::load(cfg.rx_tree, gbert::CodeType::kMedication);
  gbert::GBertModel<Scalar> model(std::move(dx), std::move(rx), make_dims<Scalar>(cfg));

  gbert::ParamStore<Scalar> store;
  gbert::Rng init_rng(gbert::derive_seed(cfg.seed, "init"));
  model.register_params(store, init_rng);
  check_model_extras(gbert::peek_checkpoint_extras(cfg.checkpoint), cfg, model);
  gbert::load_checkpoint<Scalar>(cfg.checkpoint, store, nullptr);

  fs::create_directories(cfg.out_dir);
  gbert::save_config(join(cfg.out_dir, "config.resolved"), cfg);
  const std::string path = join(cfg.out_dir, "embeddings.tsv");
  std::ofstream out(path);
  if (!out) {
    throw gbert::ValidationError("cannot write '" + path + "'");
  }
  out.precision(17);
  std::size_t rows = 0;
  for (const auto type : {gbert::CodeType::kDiagnosis, gbert::CodeType::kMedication}) {
    const auto frozen = model.frozen_code_matrix(store, type);
    const auto& tree = model.tree(type);
    const auto& leaves = tree.leaves();
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      out << tree.label(leaves[i]);
      for (std::size_t c = 0; c < frozen.cols(); ++c) {
        out << '\t' << frozen.at(i, c);
      }
      out << '\n';
      ++rows;
    }
  }
  std::cout << "wrote " << rows << " code embeddings of dim " << cfg.hidden << " to " << path
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

template <typename Scalar>
int cmd_infer(const gbert::RunConfig& cfg, std::size_t top_k) {
  require_paths(cfg, {{"dx_tree", &cfg.dx_tree},
                      {"rx_tree", &cfg.rx_tree},
                      {"records", &cfg.records},
                      {"checkpoint", &cfg.checkpoint},
                      {"out_dir", &cfg.out_dir}});
  auto corpus = load_corpus(cfg, false);
  gbert::GBertModel<Scalar> model(std::move(corpus.dx), std::move(corpus.rx),
                                  make_dims<Scalar>(cfg));

  gbert::ParamStore<Scalar> store;
  gbert::Rng init_rng(gbert::derive_seed(cfg.seed, "init"));
  model.register_params(store, init_rng);
  check_model_extras(gbert::peek_checkpoint_extras(cfg.checkpoint), cfg, model);
  gbert::load_checkpoint<Scalar>(cfg.checkpoint, store, nullptr);

  const auto dx_frozen = model.frozen_code_matrix(store, gbert::CodeType::kDiagnosis);
  const auto rx_frozen = model.frozen_code_matrix(store, gbert::CodeType::kMedication);
  const auto& rx_tree = model.tree(gbert::CodeType::kMedication);
  const auto& rx_leaves = rx_tree.leaves();

  fs::create_directories(cfg.out_dir);
  gbert::save_config(join(cfg.out_dir, "config.resolved"), cfg);
  const std::string path = join(cfg.out_dir, "predictions.jsonl");
  std::ofstream out(path);
  if (!out) {
    throw gbert::ValidationError("cannot write '" + path + "'");
  }

  std::size_t n_visits = 0;
  std::size_t n_skipped = 0;
  for (const auto& record : corpus.records) {
    if (!record.multi_visit()) {
      ++n_skipped;
      continue;
    }
    const auto preds = gbert::predict_record(model, store, dx_frozen, rx_frozen, record);
    for (const auto& vp : preds) {
      std::vector<std::size_t> order(vp.probabilities.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return vp.probabilities[a] > vp.probabilities[b];
      });
      json top = json::array();
      for (std::size_t i = 0; i < std::min(top_k, order.size()); ++i) {
        top.push_back({{"code", rx_tree.label(rx_leaves[order[i]])},
                       {"probability", vp.probabilities[order[i]]}});
      }
      json predicted = json::array();
      for (const std::size_t pos : gbert::threshold_predictions(vp.probabilities,
                                                                cfg.threshold)) {
        predicted.push_back(rx_tree.label(rx_leaves[pos]));
      }
      json line;
      line["pid"] = vp.pid;
      line["t"] = vp.t;
      line["top"] = top;
      line["predicted"] = predicted;
      out << line.dump() << '\n';
      ++n_visits;
    }
  }
  std::cout << "wrote predictions for " << n_visits << " visits to " << path;
  if (n_skipped > 0) {
    std::cout << " (skipped " << n_skipped << " single-visit records)";
  }
  std::cout << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ontology-aware visit encoder for medication recommendation"};
  app.require_subcommand(1);

  GenerateArgs gen_args;
  auto* gen = app.add_subcommand("generate", "Generate a synthetic corpus and split manifest");
  gen->add_option("--out-dir", gen_args.out_dir, "output directory (refuses to overwrite)");
  gen->add_flag("--force", gen_args.force, "overwrite an existing output directory");
  gen->add_option("--seed", gen_args.gen.seed, "rng seed")->capture_default_str();
  gen->add_option("--singles", gen_args.gen.n_single, "single-visit patients")->capture_default_str();
  gen->add_option("--multis", gen_args.gen.n_multi, "multi-visit patients")->capture_default_str();
  gen->add_option("--dx-leaves", gen_args.gen.dx_leaves, "diagnosis vocabulary size")->capture_default_str();
  gen->add_option("--rx-leaves", gen_args.gen.rx_leaves, "medication vocabulary size")->capture_default_str();
  gen->add_option("--depth", gen_args.gen.depth, "ontology depth incl. root and leaves")->capture_default_str();
  gen->add_option("--clusters", gen_args.gen.n_clusters, "latent condition clusters")->capture_default_str();
  gen->add_option("--cluster-dx", gen_args.gen.cluster_dx_pool, "dx codes per cluster")->capture_default_str();
  gen->add_option("--cluster-rx", gen_args.gen.cluster_rx_pool, "rx codes per cluster")->capture_default_str();
  gen->add_option("--dx-mean", gen_args.gen.mean_dx_per_visit, "mean dx codes per visit")->capture_default_str();
  gen->add_option("--rx-mean", gen_args.gen.mean_rx_per_visit, "mean rx codes per visit")->capture_default_str();
  gen->add_option("--extra-visit-mean", gen_args.gen.extra_visit_mean,
                  "Poisson mean of visits beyond the second")->capture_default_str();
  gen->add_option("--max-visits", gen_args.gen.max_visits, "visit cap per patient")->capture_default_str();
  gen->add_option("--noise", gen_args.gen.noise_rate, "per-code random-leaf probability")->capture_default_str();
  gen->add_option("--train-ratio", gen_args.r_train, "train share of multi-visit patients")
      ->capture_default_str();
  gen->add_option("--val-ratio", gen_args.r_val, "validation share")->capture_default_str();
  gen->add_option("--test-ratio", gen_args.r_test, "test share")->capture_default_str();

  ConfigArgs train_args;
  auto* train = app.add_subcommand(
      "train", "Alternate masked pre-training and fine-tuning, keep the best-validation model");
  add_config_options(train, train_args);

  ConfigArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_config_options(eval, eval_args);

  ConfigArgs grad_args;
  auto* grad = app.add_subcommand(
      "gradcheck", "Verify analytic gradients on a fixed tiny model (finite differences)");
  add_config_options(grad, grad_args);

  ConfigArgs export_args;
  auto* exp = app.add_subcommand("export-embeddings",
                                 "Write leaf code embeddings as tab-separated text");
  add_config_options(exp, export_args);

  ConfigArgs infer_args;
  std::size_t top_k = 10;
  auto* infer = app.add_subcommand("infer", "Write per-visit medication predictions as JSON");
  add_config_options(infer, infer_args);
  infer->add_option("--top-k", top_k, "top probabilities to list per visit")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      return cmd_generate(gen_args);
    }
    const auto dispatch = [](const ConfigArgs& args, auto&& fn64, auto&& fn32) {
      const gbert::RunConfig cfg = resolve_config(args);
      return cfg.precision == gbert::Precision::kFp64 ? fn64(cfg) : fn32(cfg);
    };
    if (train->parsed()) {
      return dispatch(train_args, cmd_train<double>, cmd_train<float>);
    }
    if (eval->parsed()) {
      return dispatch(eval_args, cmd_eval<double>, cmd_eval<float>);
    }
    if (grad->parsed()) {
      return dispatch(grad_args, cmd_gradcheck<double>, cmd_gradcheck<float>);
    }
    if (exp->parsed()) {
      return dispatch(export_args, cmd_export<double>, cmd_export<float>);
    }
    if (infer->parsed()) {
      const gbert::RunConfig cfg = resolve_config(infer_args);
      return cfg.precision == gbert::Precision::kFp64 ? cmd_infer<double>(cfg, top_k)
                                                      : cmd_infer<float>(cfg, top_k);
    }
    return 2;
  } catch (const gbert::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
