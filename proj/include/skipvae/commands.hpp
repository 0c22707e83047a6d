// Command implementations behind the CLI. Each command is a pure function
// of the run configuration and its input files and writes its outputs into
// one directory.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "skipvae/config.hpp"
#include "skipvae/dataset.hpp"
#include "skipvae/gaussian_oracle.hpp"
#include "skipvae/metrics.hpp"
#include "skipvae/persistence.hpp"
#include "skipvae/training.hpp"

namespace skipvae {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitData = 2, kExitNumeric = 3, kExitCheckFailed = 4 };

class CheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Splits {
  Dataset train;
  Dataset eval;
  std::string eval_split;
};

inline const char* kMnistTrainImages = "train-images-idx3-ubyte";
inline const char* kMnistTrainLabels = "train-labels-idx1-ubyte";
inline const char* kMnistTestImages = "t10k-images-idx3-ubyte";
inline const char* kMnistTestLabels = "t10k-labels-idx1-ubyte";
inline constexpr std::size_t kValidationSize = 10000;

namespace detail {

inline std::string resolve(const DataConfig& d, const std::string& explicit_path, const char* standard) {
  if (!explicit_path.empty()) return explicit_path;
  if (d.dir.empty()) return {};
  return (std::filesystem::path(d.dir) / standard).string();
}

inline Dataset take_first(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.count) return ds;
  return ds.slice(0, n);
}

}  // namespace detail

/// Training and held-out sets as described by the data section.
inline Splits load_splits(const RunConfig& rc) {
  const DataConfig& d = rc.data;
  const auto mode = d.binarization == "stochastic" ? BinarizeMode::stochastic : BinarizeMode::threshold;
  Splits s;
  if (d.source == "synthetic") {
    Dataset all = synthetic_grid(d.synthetic_n + d.synthetic_eval_n,
                                 d.synthetic_dim ? d.synthetic_dim : rc.model.data_dim, rc.seed);
    s.train = all.slice(0, d.synthetic_n);
    s.eval = all.slice(d.synthetic_n, all.count);
    s.eval_split = "synthetic-tail";
  } else {
    const auto train_images = detail::resolve(d, d.train_images, kMnistTrainImages);
    if (train_images.empty()) throw ConfigError("data.train_images or data.dir must be set for idx data");
    const auto train_labels = detail::resolve(d, d.train_labels, kMnistTrainLabels);
    auto labels_path = [](const std::string& p) {
      return p.empty() || !std::filesystem::exists(p) ? std::optional<std::filesystem::path>()
                                                      : std::optional<std::filesystem::path>(p);
    };
    Dataset full = binarize(load_idx(train_images, labels_path(train_labels)), mode, rc.seed);
    if (d.eval_split == "validation") {
      if (full.count <= kValidationSize) throw DataError("validation split needs more than 10000 training examples");
      s.eval = full.slice(full.count - kValidationSize, full.count);
      s.train = full.slice(0, full.count - kValidationSize);
      s.eval_split = "validation-last-10000";
    } else {
      const auto test_images = detail::resolve(d, d.test_images, kMnistTestImages);
      if (test_images.empty()) throw ConfigError("data.test_images or data.dir must be set for the test split");
      const auto test_labels = detail::resolve(d, d.test_labels, kMnistTestLabels);
      s.eval = binarize(load_idx(test_images, labels_path(test_labels)), mode, rc.seed + 1);
      s.train = std::move(full);
      s.eval_split = "test";
    }
  }
  s.train = detail::take_first(s.train, d.train_size);
  s.eval = detail::take_first(s.eval, d.eval_size);
  if (s.train.empty() || s.eval.empty()) throw DataError("training or held-out set is empty");
  if (s.train.dim != rc.model.data_dim) {
    throw ConfigError("model.data_dim = " + std::to_string(rc.model.data_dim) + " but the data has " +
                      std::to_string(s.train.dim) + " pixels");
  }
  return s;
}

inline std::string model_id(const ModelConfig& m) {
  return std::string(m.skip_enabled ? "skip-vae" : "vae") + "-L" + std::to_string(m.depth());
}

inline void prepare_output(const RunConfig& rc, const std::filesystem::path& out) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw DataError("cannot create output directory " + out.string() + ": " + ec.message());
  write_text(out / "effective_config.toml", config_to_text(rc));
}

inline TrainConfig train_config_of(const RunConfig& rc) {
  TrainConfig t = rc.train;
  t.seed = rc.seed;
  return t;
}

inline EvalConfig eval_config_of(const RunConfig& rc) {
  EvalConfig e = rc.eval;
  e.seed = rc.seed;
  return e;
}

inline TrainCallbacks progress_logger(const std::string& tag) {
  return {[tag](const EpochRecord& r) {
    std::cerr << tag << " epoch " << r.epoch << " elbo " << r.elbo << " kl " << r.kl << " (" << r.seconds << " s)\n";
  }};
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline TrainResult cmd_train(const RunConfig& rc, const std::filesystem::path& out) {
  validate(rc);
  prepare_output(rc, out);
  Splits s = load_splits(rc);
  TrainResult r;
  try {
    r = train(s.train, rc.model, train_config_of(rc), progress_logger(model_id(rc.model)));
  } catch (const TrainingAborted& e) {
    save_checkpoint(e.last_good(), out / "last_good.skvz");
    throw;
  }
  save_checkpoint(r.checkpoint, out / "checkpoint.skvz");
  write_text(out / "history.csv", history_to_csv(r.history));
  write_text(out / "timing.csv", timing_to_csv(r.history));
  return r;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline CollapseReport evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& eval, const EvalConfig& config) {
  if (eval.dim != ckpt.model.data_dim) {
    throw DataError("checkpoint expects " + std::to_string(ckpt.model.data_dim) + " pixels, data has " +
                    std::to_string(eval.dim));
  }
  return collapse_report(model_id(ckpt.model), ckpt, eval, config);
}

inline void write_reports(std::span<const CollapseReport> reports, const std::filesystem::path& out,
                          const std::string& stem) {
  export_metrics(reports, out / (stem + ".csv"), ExportFormat::csv);
  export_metrics(reports, out / (stem + ".json"), ExportFormat::json);
}

inline CollapseReport cmd_eval(const RunConfig& rc, const std::filesystem::path& checkpoint,
                               const std::filesystem::path& out) {
  validate(rc);
  Checkpoint ckpt = load_checkpoint(checkpoint);
  RunConfig effective = rc;
  effective.model = ckpt.model;
  prepare_output(effective, out);
  Splits s = load_splits(effective);
  CollapseReport r = evaluate_checkpoint(ckpt, s.eval, eval_config_of(rc));
  write_reports(std::span(&r, 1), out, "report");
  return r;
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

struct ProbeResult {
  double accuracy = 0.0;
  std::size_t train_examples = 0;
  std::size_t test_examples = 0;
};

inline ProbeResult probe_checkpoint(const Checkpoint& ckpt, const Dataset& train, const Dataset& test,
                                    const ProbeConfig& config) {
  if (!train.labels || !test.labels) throw DataError("the probe needs labeled training and held-out data");
  const Activation act = ckpt.model.activation;
  auto q_train = encode_dataset(train, ckpt.params.encoder, act);
  auto q_test = encode_dataset(test, ckpt.params.encoder, act);
  ProbeResult r;
  r.accuracy = latent_probe(q_train.mean, *train.labels, q_test.mean, *test.labels, config);
  r.train_examples = train.count;
  r.test_examples = test.count;
  return r;
}

inline std::string probe_to_csv(const std::vector<std::pair<std::string, ProbeResult>>& rows) {
  std::string out = csv_line({"model_id", "accuracy", "n_train", "n_test"});
  for (const auto& [id, r] : rows) {
    out += csv_line({id, format_double(r.accuracy), std::to_string(r.train_examples), std::to_string(r.test_examples)});
  }
  return out;
}

inline ProbeResult cmd_probe(const RunConfig& rc, const std::filesystem::path& checkpoint,
                             const std::filesystem::path& out) {
  validate(rc);
  Checkpoint ckpt = load_checkpoint(checkpoint);
  RunConfig effective = rc;
  effective.model = ckpt.model;
  prepare_output(effective, out);
  Splits s = load_splits(effective);
  if (!s.train.labels || !s.eval.labels) throw DataError("the probe needs labeled data; no label file was found");
  ProbeConfig pc = rc.probe;
  pc.seed = rc.seed;
  ProbeResult r = probe_checkpoint(ckpt, s.train, s.eval, pc);
  auto q = encode_dataset(s.eval, ckpt.params.encoder, ckpt.model.activation);
  write_text(out / "latents.csv", latents_to_csv(q.mean, s.eval.labels));
  write_text(out / "probe.csv", probe_to_csv({{model_id(ckpt.model), r}}));
  return r;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

struct CompareArm {
  Checkpoint checkpoint;
  TrainHistory history;
  CollapseReport report;
  std::optional<ProbeResult> probe;
};

struct CompareResult {
  CompareArm plain;
  CompareArm skip;
  CollapseReport delta;
  std::string eval_split;
};

/// skip minus plain for every measured column; bookkeeping columns are copied.
inline CollapseReport report_delta(const CollapseReport& plain, const CollapseReport& skip) {
  CollapseReport d = plain;
  d.model_id = "delta";
  d.elbo = skip.elbo - plain.elbo;
  d.recon = skip.recon - plain.recon;
  d.kl_term = skip.kl_term - plain.kl_term;
  d.mi_estimate = skip.mi_estimate - plain.mi_estimate;
  d.mi_standard_error = std::hypot(skip.mi_standard_error, plain.mi_standard_error);
  d.is_nll = skip.is_nll - plain.is_nll;
  return d;
}

inline std::string compare_to_csv(const CompareResult& c) {
  std::string out = csv_line(report_columns());
  out += csv_line(report_values(c.plain.report));
  out += csv_line(report_values(c.skip.report));
  auto delta = report_values(c.delta);
  // AU delta is signed.
  delta[8] = std::to_string(static_cast<long long>(c.skip.report.au_count) -
                            static_cast<long long>(c.plain.report.au_count));
  out += csv_line(delta);
  return out;
}

inline CompareResult cmd_compare(const RunConfig& rc, const std::filesystem::path& out) {
  validate(rc);
  prepare_output(rc, out);
  Splits s = load_splits(rc);
  const TrainConfig tc = train_config_of(rc);
  const EvalConfig ec = eval_config_of(rc);
  ProbeConfig pc = rc.probe;
  pc.seed = rc.seed;
  const bool labeled = s.train.labels && s.eval.labels;

  CompareResult result;
  result.eval_split = s.eval_split;
  auto run_arm = [&](bool skip, const std::string& stem) {
    ModelConfig m = rc.model;
    m.skip_enabled = skip;
    CompareArm arm;
    auto tr = train(s.train, m, tc, progress_logger(model_id(m)));
    arm.checkpoint = std::move(tr.checkpoint);
    arm.history = std::move(tr.history);
    arm.report = evaluate_checkpoint(arm.checkpoint, s.eval, ec);
    if (labeled) arm.probe = probe_checkpoint(arm.checkpoint, s.train, s.eval, pc);
    save_checkpoint(arm.checkpoint, out / (stem + ".skvz"));
    write_text(out / (stem + "_history.csv"), history_to_csv(arm.history));
    write_text(out / (stem + "_timing.csv"), timing_to_csv(arm.history));
    return arm;
  };
  // Both arms share every seed; only skip_enabled differs. With skips already
  // requested in the base config the two arms are identical.
  result.plain = run_arm(rc.model.skip_enabled, "vae");
  result.skip = run_arm(true, "skip_vae");
  if (rc.model.skip_enabled) result.skip.report.model_id += "-b";
  result.delta = report_delta(result.plain.report, result.skip.report);

  write_text(out / "compare.csv", compare_to_csv(result));
  std::vector<CollapseReport> both{result.plain.report, result.skip.report, result.delta};
  write_text(out / "compare.json", reports_to_json(both));
  if (labeled) {
    write_text(out / "probe.csv", probe_to_csv({{result.plain.report.model_id, *result.plain.probe},
                                                {result.skip.report.model_id, *result.skip.probe}}));
  }
  return result;
}

// ---------------------------------------------------------------------------
// oracle-check
// ---------------------------------------------------------------------------

struct OracleCheckResult {
  std::vector<Theorem1Row> theorem1;
  std::vector<MiValidationRow> mi;
  std::size_t ordering_violations = 0;
  std::size_t tolerance_failures = 0;

  bool passed() const { return ordering_violations == 0 && tolerance_failures == 0; }
};

inline std::string theorem1_to_csv(const std::vector<Theorem1Row>& rows) {
  std::string out = csv_line({"config_id", "I_plain", "I_skip", "margin"});
  for (const auto& r : rows) {
    out += csv_line({std::to_string(r.config_id), format_double(r.i_plain), format_double(r.i_skip),
                     format_double(r.margin)});
  }
  return out;
}

inline std::string mi_validation_to_csv(const std::vector<MiValidationRow>& rows) {
  std::string out = csv_line({"model_id", "dim", "exact_mi", "estimate", "stderr", "error", "tolerance", "pass"});
  for (const auto& r : rows) {
    out += csv_line({std::to_string(r.model_id), std::to_string(r.latent_dim), format_double(r.exact),
                     format_double(r.estimate), format_double(r.standard_error), format_double(r.error),
                     format_double(r.tolerance), r.pass ? "1" : "0"});
  }
  return out;
}

inline OracleCheckResult cmd_oracle_check(const RunConfig& rc, const std::filesystem::path& out) {
  validate(rc);
  prepare_output(rc, out);
  OracleCheckResult r;
  const auto draw = rc.oracle.skip_draw == "aligned" ? SkipDraw::aligned : SkipDraw::gaussian;
  r.theorem1 = theorem1_sweep(rc.oracle.sweep_size, rc.seed, draw);
  for (const auto& row : r.theorem1) r.ordering_violations += row.holds ? 0 : 1;

  MiValidationConfig mc;
  mc.models = rc.oracle.mi_models;
  mc.points = rc.oracle.mi_points;
  mc.samples = rc.oracle.mi_samples;
  mc.min_tolerance = rc.oracle.tolerance;
  r.mi = validate_mi_estimator(rc.seed, mc);
  for (const auto& row : r.mi) r.tolerance_failures += row.pass ? 0 : 1;

  write_text(out / "theorem1.csv", theorem1_to_csv(r.theorem1));
  write_text(out / "mi_validation.csv", mi_validation_to_csv(r.mi));
  return r;
}

}  // namespace skipvae
