// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.
//
//   acceptance [--out DIR] [--epochs N] [--mnist DIR] [--only 1,2,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "skipvae/skipvae.hpp"

using namespace skipvae;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Options {
  fs::path out = "acceptance_out";
  std::size_t epochs = 50;
  std::string mnist = SKIPVAE_MNIST_DIR;
  std::set<int> only;
  std::uint64_t seed = 1;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  double worst = 0.0, largest = 0.0;
  std::size_t checked = 0, bad = 0;
  for (std::uint64_t s = 0; s < 25; ++s) {
    Rng rng = substream(s, "acceptance/grad");
    std::uniform_int_distribution<std::size_t> width(1, 8), batch(1, 5), pixels(2, 8);
    ModelConfig m;
    m.latent_dim = 2;
    m.data_dim = pixels(rng);
    m.encoder_widths = {width(rng), width(rng)};
    m.decoder_widths = {width(rng), width(rng)};
    m.skip_enabled = s % 2 == 1;
    m.activation = Activation::tanh;
    VaeParams params = init_params(m, s);
    // Non-zero biases so every parameter path is exercised.
    for_each_parameter(params, [&](const std::string& name, Tensor& t) {
      if (name.ends_with("bias")) t = scale(standard_normal(rng, t.shape()), 0.1);
    });
    const std::size_t rows = batch(rng);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> xv(rows * m.data_dim);
    for (auto& v : xv) v = coin(rng) ? 1.0 : 0.0;
    const Tensor x = Tensor::matrix(rows, m.data_dim, xv);

    auto objective = [&](const VaeParams& p) {
      Rng noise(1000 + s);
      return elbo_batch(x, p, m.activation, 1.0, 1, noise).objective.item();
    };
    Tape tape;
    VaeParams bound = bind(params, tape);
    Rng noise(1000 + s);
    auto grads = tape.backward(elbo_batch(x, bound, m.activation, 1.0, 1, noise).objective);
    auto analytic = gradients_for(bound, grads);
    auto ptrs = parameter_pointers(params);
    for (std::size_t k = 0; k < ptrs.size(); ++k) {
      const Tensor original = *ptrs[k];
      for (std::size_t i = 0; i < original.size(); ++i) {
        const double h = 1e-5;
        std::vector<double> up(original.values().begin(), original.values().end()), dn = up;
        up[i] += h;
        dn[i] -= h;
        *ptrs[k] = Tensor(original.shape(), up);
        const double fu = objective(params);
        *ptrs[k] = Tensor(original.shape(), dn);
        const double fd = objective(params);
        *ptrs[k] = original;
        const double numeric = (fu - fd) / (2 * h);
        const double diff = std::abs(analytic[k][i] - numeric);
        const double rel = diff / std::max(std::abs(analytic[k][i]), std::abs(numeric));
        ++checked;
        largest = std::max(largest, std::abs(numeric));
        if (diff > 1e-8) {
          worst = std::max(worst, rel);
          if (rel > 1e-5) ++bad;
        }
      }
    }
  }
  return {bad == 0, std::to_string(checked) + " parameter entries over 25 models, " + std::to_string(bad) +
                        " outside tolerance, worst relative error above the floor " + fmt("%.2e", worst) +
                        ", largest |gradient| " + fmt("%.2e", largest)};
}

// ---------------------------------------------------------------------------
// 2. Skip-reduction identity
// ---------------------------------------------------------------------------

Outcome skip_reduction() {
  std::size_t mismatches = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng = substream(s, "acceptance/skip");
    std::uniform_int_distribution<std::size_t> width(1, 32), depth(1, 4), latent(1, 10);
    ModelConfig m;
    m.latent_dim = latent(rng);
    m.data_dim = width(rng);
    m.encoder_widths = {4};
    m.decoder_widths.assign(depth(rng), 0);
    for (auto& w : m.decoder_widths) w = width(rng);
    m.activation = static_cast<Activation>(s % 3);
    auto p = init_params(m, s);
    DecoderParams skip = p.decoder;
    skip.skips = neutral_skips(p.decoder);
    Tensor z = scale(standard_normal(rng, {3, m.latent_dim}), 2.0);
    if (decode_plain(z, p.decoder, m.activation).storage() != decode_skip(z, skip, m.activation).storage()) {
      ++mismatches;
    }
  }
  return {mismatches == 0, std::to_string(100 - mismatches) + "/100 random inputs bit-identical"};
}

// ---------------------------------------------------------------------------
// 3. Theorem 1 on the linear-Gaussian sweep
// ---------------------------------------------------------------------------

Outcome theorem1(const Options& opt) {
  auto rows = theorem1_sweep(100, opt.seed, SkipDraw::gaussian);
  std::size_t holds = 0;
  double worst = 0.0;
  for (const auto& r : rows) {
    holds += r.holds ? 1 : 0;
    worst = std::min(worst, r.margin);
  }
  auto aligned = theorem1_sweep(100, opt.seed, SkipDraw::aligned);
  const auto aligned_holds = std::count_if(aligned.begin(), aligned.end(), [](const auto& r) { return r.holds; });
  fs::create_directories(opt.out);
  write_text(opt.out / "theorem1.csv", theorem1_to_csv(rows));
  return {holds == rows.size(),
          std::to_string(holds) + "/100 configurations with I_skip >= I_plain (D_skip entries N(0,1)); most " +
              "negative margin " + fmt("%.4f", worst) + " nats; informational: D_skip = alpha*C*B holds " +
              std::to_string(aligned_holds) + "/100"};
}

// ---------------------------------------------------------------------------
// 4. MI estimator against the closed form
// ---------------------------------------------------------------------------

Outcome mi_validity(const Options& opt, std::vector<double>& mi_runs, std::vector<double>& caps) {
  MiValidationConfig c;
  auto rows = validate_mi_estimator(opt.seed, c);
  const double limit = 0.9 * std::log(double(c.points));
  std::size_t ok = 0;
  double worst = 0.0;
  for (const auto& r : rows) {
    ok += r.pass && r.exact <= limit ? 1 : 0;
    worst = std::max(worst, std::abs(r.error) / r.tolerance);
    mi_runs.push_back(r.estimate);
    caps.push_back(std::log(double(c.points)));
  }
  write_text(opt.out / "mi_validation.csv", mi_validation_to_csv(rows));
  return {ok == rows.size(), std::to_string(ok) + "/10 models within max(3 se, 0.05); worst |error|/tolerance " +
                                 fmt("%.2f", worst)};
}

// ---------------------------------------------------------------------------
// 5. Estimator cap
// ---------------------------------------------------------------------------

Outcome estimator_cap(const Options& opt, std::vector<double>& mi_runs, std::vector<double>& caps) {
  Rng rng = substream(opt.seed, "acceptance/cap");
  const std::size_t n = 2000;
  auto m = diagonal_posterior_chain(std::vector<double>(16, 1000.0), rng);
  Matrix x = sample_x(m, n, rng);
  auto est = mutual_information(diagonal_posterior(m, x), n, 4, opt.seed);
  const double ln_n = std::log(double(n));
  mi_runs.push_back(est.mi);
  caps.push_back(ln_n);
  // Further runs at small N where the cap binds for moderate information.
  for (std::size_t small : {10u, 100u, 1000u}) {
    auto e = mutual_information(diagonal_posterior(m, x), small, 4, opt.seed + small);
    mi_runs.push_back(e.mi);
    caps.push_back(std::log(double(small)));
  }
  std::size_t over = 0;
  for (std::size_t i = 0; i < mi_runs.size(); ++i) over += mi_runs[i] > caps[i] ? 1 : 0;
  const bool saturates = std::abs(est.mi - ln_n) <= est.standard_error + 1e-9;
  return {over == 0 && saturates, std::to_string(mi_runs.size() - over) + "/" + std::to_string(mi_runs.size()) +
                                      " runs with mi <= ln N; high-MI oracle (true " + fmt("%.2f", exact_mi(m)) +
                                      " nats) estimates " + fmt("%.6f", est.mi) + " vs ln N = " + fmt("%.6f", ln_n) + ", gap " +
                                      fmt("%.2e", ln_n - est.mi) + " (se " + fmt("%.2e", est.standard_error) + ")"};
}

// ---------------------------------------------------------------------------
// 6, 7, 10. MNIST compare runs
// ---------------------------------------------------------------------------

struct DepthRun {
  std::size_t layers = 0;
  CompareResult result;
};

std::vector<DepthRun> mnist_runs(const Options& opt, std::string& error) {
  std::vector<DepthRun> runs;
  if (!fs::exists(fs::path(opt.mnist) / kMnistTrainImages)) {
    error = "MNIST IDX files not found in " + opt.mnist;
    return runs;
  }
  for (std::size_t layers : {2u, 3u, 4u}) {
    RunConfig rc;
    rc.seed = opt.seed;
    rc.data.source = "idx";
    rc.data.dir = opt.mnist;
    rc.data.train_size = 10000;
    rc.data.eval_size = 2000;
    rc.data.eval_split = "test";
    rc.model.latent_dim = 50;
    rc.model.data_dim = 784;
    rc.model.encoder_widths = {512, 512};
    rc.model.decoder_widths.assign(layers, 512);
    rc.model.activation = Activation::relu;
    rc.train.epochs = opt.epochs;
    rc.train.batch_size = 100;
    rc.train.learning_rate = 1e-3;
    rc.eval.mi_points = 2000;
    rc.eval.mi_samples = 4;
    rc.eval.is_samples = 200;
    const auto start = std::chrono::steady_clock::now();
    DepthRun run{layers, cmd_compare(rc, opt.out / ("mnist_L" + std::to_string(layers)))};
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "L=" << layers << " compare finished in " << secs << " s\n";
    runs.push_back(std::move(run));
  }
  return runs;
}

std::string arm_summary(const CollapseReport& r) {
  std::ostringstream os;
  os << r.model_id << " elbo " << fmt("%.2f", r.elbo) << " kl " << fmt("%.2f", r.kl_term) << " mi "
     << fmt("%.2f", r.mi_estimate) << " au " << r.au_count;
  return os.str();
}

Outcome table3(const std::vector<DepthRun>& runs, const std::string& error) {
  if (runs.empty()) return {false, error};
  bool ok = true;
  std::ostringstream os;
  for (const auto& run : runs) {
    const auto& p = run.result.plain.report;
    const auto& s = run.result.skip.report;
    const bool kl = s.kl_term > p.kl_term, au = s.au_count > p.au_count;
    const bool elbo = std::abs(s.elbo - p.elbo) <= 2.0;
    if (run.layers >= 3) ok = ok && kl && au && elbo;
    os << "\n      L=" << run.layers << ": " << arm_summary(p) << " | " << arm_summary(s) << " | KL gap "
       << (kl ? "+" : "-") << " AU gap " << (au ? "+" : "-") << " |dELBO| " << fmt("%.2f", std::abs(s.elbo - p.elbo))
       << (run.layers >= 3 ? "" : " (not asserted)");
  }
  return {ok, "skip > plain in KL and AU with |dELBO| <= 2 at 3 and 4 layers" + os.str()};
}

Outcome bound_ordering(const std::vector<DepthRun>& runs, const std::string& error) {
  if (runs.empty()) return {false, error};
  std::size_t ok = 0, total = 0;
  std::ostringstream os;
  for (const auto& run : runs) {
    for (const auto* r : {&run.result.plain.report, &run.result.skip.report}) {
      const double se = std::hypot(r->is_standard_error, r->elbo_standard_error);
      const bool holds = r->is_nll >= r->elbo - 3 * se;
      ok += holds ? 1 : 0;
      ++total;
      os << "\n      " << r->model_id << ": IS " << fmt("%.2f", r->is_nll) << " vs ELBO " << fmt("%.2f", r->elbo);
    }
  }
  return {ok == total, std::to_string(ok) + "/" + std::to_string(total) + " checkpoints with IS(200) >= ELBO - 3 se" +
                           os.str()};
}

Outcome probe_direction(const std::vector<DepthRun>& runs, const std::string& error) {
  if (runs.empty()) return {false, error};
  bool ok = true;
  std::ostringstream os;
  for (const auto& run : runs) {
    const double a = run.result.plain.probe->accuracy, b = run.result.skip.probe->accuracy;
    ok = ok && b >= a - 0.002;
    os << " L=" << run.layers << ": " << fmt("%.4f", a) << " -> " << fmt("%.4f", b) << ";";
  }
  return {ok, "skip probe accuracy >= plain - 0.2%" + os.str()};
}

// ---------------------------------------------------------------------------
// 8. Refinement contract
// ---------------------------------------------------------------------------

Outcome refinement(const Options& opt) {
  Dataset data = synthetic_grid(300, 40, opt.seed);
  ModelConfig m;
  m.latent_dim = 4;
  m.data_dim = 40;
  m.encoder_widths = {32};
  m.decoder_widths = {32, 32};
  m.skip_enabled = true;
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 30;
  tc.seed = opt.seed;
  auto ckpt = train(data, m, tc).checkpoint;
  Tensor x = data.rows_tensor(0, 50);
  auto q0 = encode(x, ckpt.params.encoder, m.activation);
  Rng rng = substream(opt.seed, streams::refine);
  auto r = refine_variational(q0, reparam_elbo(bernoulli_decoder_likelihood(x, ckpt.params.decoder, m.activation)),
                              {10, 0.5}, rng);
  std::size_t monotone = 0;
  double gain = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    bool ok = true;
    for (std::size_t k = 1; k < r.trace.size(); ++k) ok = ok && r.trace[k][i] >= r.trace[k - 1][i];
    monotone += ok ? 1 : 0;
    gain += (r.trace.back()[i] - r.trace.front()[i]) / 50.0;
  }

  Rng orng = substream(opt.seed, "acceptance/refine-oracle");
  auto model = diagonal_posterior_chain({0.3, 0.8, 1.5, 2.5}, orng);
  Matrix ox = sample_x(model, 50, orng);
  auto exact = optimal_diagonal_posterior(model, ox);
  auto fixed = refine_variational(exact, analytic_elbo(ox, model), {10, 0.5}, orng);
  double moved = 0.0;
  for (std::size_t i = 0; i < exact.mean.size(); ++i) {
    moved = std::max({moved, std::abs(fixed.params.mean[i] - exact.mean[i]),
                      std::abs(fixed.params.logvar[i] - exact.logvar[i])});
  }
  return {monotone == 50 && !r.aborted && moved < 1e-8,
          std::to_string(monotone) + "/50 traces non-decreasing over 10 steps (mean gain " + fmt("%.3f", gain) +
              " nats); max parameter move from the exact posterior " + fmt("%.2e", moved)};
}

// ---------------------------------------------------------------------------
// 9. Collapse fixture
// ---------------------------------------------------------------------------

Outcome collapse_fixture(const Options& opt) {
  Dataset data;
  std::string source;
  if (fs::exists(fs::path(opt.mnist) / kMnistTestImages)) {
    data = binarize(load_idx(fs::path(opt.mnist) / kMnistTestImages), BinarizeMode::threshold).slice(0, 2000);
    source = "MNIST test[0:2000]";
  } else {
    data = synthetic_grid(2000, 784, opt.seed);
    source = "synthetic";
  }
  Checkpoint c;
  c.model.latent_dim = 50;
  c.model.data_dim = 784;
  c.params = init_params(c.model, opt.seed);
  collapse_to_prior(c.params.encoder);
  EvalConfig ec;
  ec.importance = false;
  ec.seed = opt.seed;
  auto r = collapse_report("collapsed", c, data, ec);
  const bool ok = r.kl_term == 0.0 && std::abs(r.mi_estimate) <= std::max(r.mi_standard_error, 1e-12) && r.au_count == 0;
  std::ostringstream os;
  os << source << ": kl " << r.kl_term << ", mi " << r.mi_estimate << " (se " << r.mi_standard_error << "), au "
     << r.au_count;
  return {ok, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  CLI::App app{"acceptance criteria"};
  std::string only;
  app.add_option("--out", opt.out);
  app.add_option("--epochs", opt.epochs, "training epochs per MNIST arm");
  app.add_option("--mnist", opt.mnist);
  app.add_option("--seed", opt.seed);
  app.add_option("--only", only, "comma-separated criterion numbers");
  CLI11_PARSE(app, argc, argv);
  std::stringstream ss(only);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) opt.only.insert(std::stoi(item));
  fs::create_directories(opt.out);

  auto wanted = [&](int k) { return opt.only.empty() || opt.only.count(k) > 0; };
  std::map<int, std::pair<std::string, Outcome>> results;
  auto run = [&](int k, const std::string& name, auto&& fn) {
    if (!wanted(k)) return;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    o.detail += " [" + fmt("%.1f", secs) + " s]";
    results[k] = {name, o};
    std::printf("criterion %2d %s  %s: %s\n", k, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  };

  std::vector<double> mi_runs, caps;
  run(1, "gradient correctness", [&] { return gradient_correctness(); });
  run(2, "skip-reduction identity", [&] { return skip_reduction(); });
  run(3, "theorem 1, exact linear instance", [&] { return theorem1(opt); });
  run(4, "MI estimator validity", [&] { return mi_validity(opt, mi_runs, caps); });
  run(8, "refinement contract", [&] { return refinement(opt); });
  run(9, "collapse fixture", [&] { return collapse_fixture(opt); });

  std::vector<DepthRun> runs;
  std::string mnist_error;
  if (wanted(6) || wanted(7) || wanted(10) || wanted(5)) {
    if (wanted(6) || wanted(7) || wanted(10)) {
      try {
        runs = mnist_runs(opt, mnist_error);
      } catch (const std::exception& e) {
        mnist_error = std::string("error: ") + e.what();
      }
    }
    for (const auto& r : runs) {
      for (const auto* rep : {&r.result.plain.report, &r.result.skip.report}) {
        mi_runs.push_back(rep->mi_estimate);
        caps.push_back(std::log(double(rep->n_mi_points)));
      }
    }
  }
  run(5, "estimator cap", [&] { return estimator_cap(opt, mi_runs, caps); });
  run(6, "collapse direction at desk scale", [&] { return table3(runs, mnist_error); });
  run(7, "bound ordering", [&] { return bound_ordering(runs, mnist_error); });
  run(10, "probe direction (soft)", [&] { return probe_direction(runs, mnist_error); });

  std::size_t failed = 0;
  std::printf("\nsummary:\n");
  for (const auto& [k, entry] : results) {
    std::printf("  criterion %2d %s  %s\n", k, entry.second.pass ? "PASS" : "FAIL", entry.first.c_str());
    failed += entry.second.pass ? 0 : 1;
  }
  std::printf("%zu/%zu criteria passed\n", results.size() - failed, results.size());
  return failed == 0 ? 0 : 1;
}
