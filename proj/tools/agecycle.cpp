// agecycle: synthetic data, training, translation and evaluation.

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "agecycle/commands.hpp"
#include "agecycle/errors.hpp"

namespace {

using namespace agecycle;

struct Common {
  std::uint64_t seed = 0;
  int resolution = 64;
  int groups = 4;
  int threads = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--resolution", c.resolution, "Image side in pixels");
  cmd->add_option("--groups", c.groups, "Number of age groups");
  cmd->add_option("--threads", c.threads, "Compute threads (1 for bit-reproducible runs)");
}

// Flat `key = value` file for one subcommand. Options already given on the
// command line keep their values.
void apply_config_file(CLI::App* cmd, const std::string& path) {
  if (path.empty()) {
    return;
  }
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_file(path);
  } catch (const CLI::FileError& e) {
    throw IoError(e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") {
      continue;  // section markers
    }
    CLI::Option* opt = cmd->get_option_no_throw("--" + item.name);
    if (opt == nullptr || item.name == "config") {
      throw InvalidInput("config " + path + ": unknown key '" + item.name + "'");
    }
    if (opt->count() > 0) {
      continue;
    }
    for (const auto& value : item.inputs) {
      opt->add_result(value);
    }
    opt->run_callback();
  }
}

void apply_threads(int threads) {
  if (threads > 0) {
    torch::set_num_threads(threads);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-guided conditional face aging"};
  app.set_version_flag("--version", agecycle::tool_version());
  app.require_subcommand(1);

  // synth-data
  Common synth_common;
  synth_common.seed = 7;
  SynthDataOptions synth;
  auto* synth_cmd = app.add_subcommand("synth-data", "Render the procedural face dataset");
  synth_cmd->add_option("--out", synth.out_dir, "Output directory")->required();
  synth_cmd->add_option("--subjects", synth.n_subjects, "Number of subjects");
  add_common(synth_cmd, synth_common);

  // train
  Common train_common;
  TrainOptions train;
  std::optional<double> lambda_recon;
  std::optional<double> lambda_actv;
  std::optional<double> lambda_reg;
  bool no_attention = false;
  bool unordered = false;
  auto& tc = train.config;
  auto* train_cmd = app.add_subcommand("train", "Train both generators and discriminators");
  train_cmd->add_option("--data", train.data, "Dataset manifest CSV")->required();
  train_cmd->add_option("--out", train.out_dir, "Run directory")->required();
  train_cmd->add_option("--epochs", tc.epochs);
  train_cmd->add_option("--batch-size", tc.batch_size);
  train_cmd->add_option("--lr", tc.learning_rate, "Adam learning rate");
  train_cmd->add_option("--g-update-period", tc.g_update_period,
                        "Discriminator steps per generator step");
  train_cmd->add_option("--lambda-recon", lambda_recon, "Fix the reconstruction weight");
  train_cmd->add_option("--lambda-actv", lambda_actv, "Fix the attention activation weight");
  train_cmd->add_option("--lambda-reg", lambda_reg, "Fix the age regression weight");
  train_cmd->add_flag("--no-attention", no_attention, "Ablation: plain generator output");
  train_cmd->add_flag("--unordered-input", unordered,
                      "Ablation: sample any pair of distinct groups");
  train_cmd->add_flag("--fake-age-trains-d", tc.fake_age_trains_d);
  train_cmd->add_option("--g-width", tc.g_base_width);
  train_cmd->add_option("--g-res-blocks", tc.g_res_blocks);
  train_cmd->add_option("--d-width", tc.d_base_width);
  train_cmd->add_option("--d-max-width", tc.d_max_width);
  train_cmd->add_option("--train-fraction", train.train_fraction);
  train_cmd->add_option("--split-seed", train.split_seed);
  train_cmd->add_option("--max-steps", train.max_steps, "Stop early after this many steps");
  train_cmd->add_flag("--resume", train.resume, "Continue from checkpoint_latest.agc");
  add_common(train_cmd, train_common);

  // translate
  TranslateOptions translate;
  std::string direction = "progress";
  int translate_threads = 0;
  auto* translate_cmd = app.add_subcommand("translate", "Age faces with a trained checkpoint");
  translate_cmd->add_option("--checkpoint", translate.checkpoint)->required();
  translate_cmd->add_option("--input", translate.input, "Image or directory of images")
      ->required();
  translate_cmd->add_option("--direction", direction, "progress or regress");
  translate_cmd->add_option("--source-group", translate.source_group)->required();
  translate_cmd->add_option("--targets", translate.targets, "Target groups")
      ->required()
      ->delimiter(',');
  translate_cmd->add_option("--out", translate.out_dir)->required();
  translate_cmd->add_flag("--export-attention", translate.export_attention,
                          "Also write attention maps (mask * 255; dark = modified)");
  translate_cmd->add_option("--threads", translate_threads);

  // eval
  EvalOptions eval;
  std::string backend = "oracle";
  std::string token_env = "AGECYCLE_API_TOKEN";
  double timeout_s = 10.0;
  int eval_threads = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Age error and identity preservation on a test split");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--data", eval.data, "Test manifest CSV (e.g. <run>/test.csv)")->required();
  eval_cmd->add_option("--out", eval.out_dir)->required();
  eval_cmd->add_option("--backend", backend)->check(CLI::IsMember({"oracle", "remote"}));
  eval_cmd->add_option("--endpoint", eval.remote.endpoint, "Remote service base URL");
  eval_cmd->add_option("--token-env", token_env,
                       "Environment variable holding the remote bearer token");
  eval_cmd->add_option("--timeout", timeout_s, "Remote request timeout in seconds");
  eval_cmd->add_option("--concurrency", eval.remote.max_concurrency);
  eval_cmd->add_option("--threshold", eval.identity_threshold, "Verification threshold (0-100)");
  eval_cmd->add_option("--oracle", eval.oracle_path, "Age oracle cache file");
  eval_cmd->add_option("--threads", eval_threads);

  std::map<CLI::App*, std::string> config_files;
  for (auto* cmd : {synth_cmd, train_cmd, translate_cmd, eval_cmd}) {
    cmd->add_option("--config", config_files[cmd],
                    "Flat key = value file; command-line flags win");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (auto* cmd : app.get_subcommands()) {
      apply_config_file(cmd, config_files[cmd]);
    }
    if (*synth_cmd) {
      synth.n_groups = synth_common.groups;
      synth.resolution = synth_common.resolution;
      synth.seed = synth_common.seed;
      std::cout << cmd_synth_data(synth).string() << '\n';
    } else if (*train_cmd) {
      tc.seed = train_common.seed;
      tc.resolution = train_common.resolution;
      tc.n_groups = train_common.groups;
      tc.threads = train_common.threads;
      tc.use_attention = !no_attention;
      tc.ordered_input = !unordered;
      tc.weight_overrides = {lambda_recon, lambda_actv, lambda_reg};
      apply_threads(tc.threads);
      std::cout << cmd_train(train).string() << '\n';
    } else if (*translate_cmd) {
      apply_threads(translate_threads);
      translate.direction = parse_direction(direction);
      for (const auto& p : cmd_translate(translate)) {
        std::cout << p.string() << '\n';
      }
    } else if (*eval_cmd) {
      apply_threads(eval_threads);
      eval.backend = backend == "remote" ? BackendKind::kRemote : BackendKind::kOracle;
      if (eval.backend == BackendKind::kRemote) {
        if (eval.remote.endpoint.empty()) {
          throw InvalidInput("--backend remote needs --endpoint");
        }
        if (const char* token = std::getenv(token_env.c_str())) {
          eval.remote.bearer_token = token;
        }
        eval.remote.timeout =
            std::chrono::milliseconds(static_cast<std::int64_t>(timeout_s * 1000.0));
      }
      const auto report = cmd_eval(eval);
      std::cout << report.to_table("model");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
