#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "skipvae/commands.hpp"

using namespace skipvae;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
};

RunConfig effective_config(const Globals& g) {
  RunConfig rc = g.config_path.empty() ? RunConfig{} : load_config_file(g.config_path);
  for (const auto& o : g.overrides) apply_override(rc, o);
  if (g.seed) rc.seed = *g.seed;
  return rc;
}

template <class Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and diagnose VAEs with plain and skip-connected decoders"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "sectioned key = value config file");
  app.add_option("--set", g.overrides, "dotted override key=value (repeatable)")->take_all();
  app.add_option("--out", g.out, "output directory");
  app.add_option("--seed", g.seed, "root seed");
  std::string checkpoint;

  auto* train_cmd = app.add_subcommand("train", "train one model");
  auto* eval_cmd = app.add_subcommand("eval", "collapse diagnostics for a checkpoint");
  eval_cmd->add_option("checkpoint", checkpoint)->required();
  auto* compare_cmd = app.add_subcommand("compare", "train VAE and Skip-VAE with identical budgets");
  auto* oracle_cmd = app.add_subcommand("oracle-check", "closed-form linear-Gaussian checks");
  auto* probe_cmd = app.add_subcommand("probe", "classification probe on posterior means");
  probe_cmd->add_option("checkpoint", checkpoint)->required();
  for (auto* sub : {train_cmd, eval_cmd, compare_cmd, oracle_cmd, probe_cmd}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  return guarded([&]() -> int {
    RunConfig rc = effective_config(g);
    if (*train_cmd) {
      auto r = cmd_train(rc, g.out);
      std::cout << "trained " << model_id(r.checkpoint.model) << " for " << r.checkpoint.epochs_completed
                << " epochs -> " << g.out << "\n";
    } else if (*eval_cmd) {
      auto r = cmd_eval(rc, checkpoint, g.out);
      std::cout << csv_line(report_columns()) << csv_line(report_values(r));
    } else if (*compare_cmd) {
      auto r = cmd_compare(rc, g.out);
      std::cout << compare_to_csv(r);
    } else if (*oracle_cmd) {
      auto r = cmd_oracle_check(rc, g.out);
      std::cout << "theorem-1 ordering violations: " << r.ordering_violations << " / " << r.theorem1.size() << "\n"
                << "MI estimator tolerance failures: " << r.tolerance_failures << " / " << r.mi.size() << "\n";
      if (!r.passed()) throw CheckFailure("oracle check reported violations");
    } else if (*probe_cmd) {
      auto r = cmd_probe(rc, checkpoint, g.out);
      std::cout << "probe accuracy " << format_double(r.accuracy) << "\n";
    }
    return kExitOk;
  });
}
