// quamba: post-training quantization toolkit for selective state space
// models. JSON reports go to stdout, tables and diagnostics to stderr.
//
// Exit status: 0 success, 1 property violation, 2 usage or input error.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"

namespace {

using namespace quamba;
using namespace quamba::cli;

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw Error("not a number: '" + item + "'");
    out.push_back(v);
  }
  return out;
}

void add_config_flags(CLI::App* c, ModelConfig& cfg) {
  c->add_option("--vocab", cfg.vocab_size, "vocabulary size")->capture_default_str();
  c->add_option("--d-model", cfg.d_model, "model width")->capture_default_str();
  c->add_option("--n-layers", cfg.n_layers, "number of blocks")->capture_default_str();
  c->add_option("--expand", cfg.expand, "inner expansion factor")->capture_default_str();
  c->add_option("--d-state", cfg.d_state, "SSM state size")->capture_default_str();
  c->add_option("--d-conv", cfg.d_conv, "causal conv width")->capture_default_str();
  c->add_option("--dt-rank", cfg.dt_rank, "rank of the time-step projection")->capture_default_str();
  c->add_option("--bits", cfg.bits, "quantization bit width")->capture_default_str();
}

// Optional JSON file with any subset of the config keys.
void apply_config_file(const std::string& path, ModelConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
    auto take = [&](const char* key, std::size_t& dst) {
      if (j.contains(key)) dst = j.at(key).get<std::size_t>();
    };
    take("vocab_size", cfg.vocab_size);
    take("d_model", cfg.d_model);
    take("n_layers", cfg.n_layers);
    take("expand", cfg.expand);
    take("d_state", cfg.d_state);
    take("d_conv", cfg.d_conv);
    take("dt_rank", cfg.dt_rank);
    if (j.contains("bit_width")) cfg.bits = j.at("bit_width").get<int>();
  } catch (const nlohmann::json::exception& ex) {
    throw Error("malformed config '" + path + "': " + ex.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quamba: post-training quantization toolkit for selective SSMs"};
  app.require_subcommand(1);

  InitToyArgs init;
  std::string config_path;
  auto* c_init = app.add_subcommand("init-toy", "write a seeded toy model and synthetic corpus");
  c_init->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  add_config_flags(c_init, init.config);
  c_init->add_option("--seed", init.seed, "random seed")->capture_default_str();
  c_init->add_option("--out", init.out, "model container path")->required();
  c_init->add_option("--corpus-out", init.corpus_out, "corpus path (default <out>.jsonl)");
  c_init->add_option("--sequences", init.corpus.sequences, "corpus sequences")->capture_default_str();
  c_init->add_option("--length", init.corpus.length, "tokens per sequence")->capture_default_str();
  c_init->add_flag("--inject-outliers", init.inject_outliers, "add scan-input and output outlier channels");

  CalibrateArgs cal;
  auto* c_cal = app.add_subcommand("calibrate", "collect static activation scales");
  c_cal->add_option("--model", cal.model, "float model")->required()->check(CLI::ExistingFile);
  c_cal->add_option("--corpus", cal.corpus, "calibration corpus (JSONL)")->required()->check(CLI::ExistingFile);
  c_cal->add_option("--samples", cal.samples, "sequences to sample")->capture_default_str();
  c_cal->add_option("--percentile", cal.percentile, "scan-input percentile")->capture_default_str();
  c_cal->add_option("--seed", cal.seed, "sampling seed")->capture_default_str();
  c_cal->add_option("--out-scales", cal.out_scales, "scale set output")->required();

  QuantizeArgs qa;
  std::string mode_text = "quamba";
  auto* c_q = app.add_subcommand("quantize", "quantize a float model with a scale set");
  c_q->add_option("--model", qa.model, "float model")->required()->check(CLI::ExistingFile);
  c_q->add_option("--scales", qa.scales, "scale set")->required()->check(CLI::ExistingFile);
  c_q->add_option("--mode", mode_text, "naive|in-per|out-had|quamba")->capture_default_str();
  c_q->add_option("--out", qa.out, "quantized container output")->required();

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "perplexity and output deviation");
  c_ev->add_option("--model", ev.model, "model to evaluate")->required()->check(CLI::ExistingFile);
  c_ev->add_option("--reference", ev.reference, "reference model")->check(CLI::ExistingFile);
  c_ev->add_option("--corpus", ev.corpus, "evaluation corpus")->required()->check(CLI::ExistingFile);

  SweepArgs sw;
  std::string p_list = "99,99.9,99.99,99.999";
  std::string sweep_mode = "quamba";
  auto* c_sw = app.add_subcommand("sweep-percentile", "calibrate, quantize and evaluate per percentile");
  c_sw->add_option("--model", sw.model, "float model")->required()->check(CLI::ExistingFile);
  c_sw->add_option("--corpus", sw.corpus, "calibration corpus")->required()->check(CLI::ExistingFile);
  c_sw->add_option("--eval-corpus", sw.eval_corpus, "evaluation corpus (default: --corpus)")
      ->check(CLI::ExistingFile);
  c_sw->add_option("--p", p_list, "comma-separated percentiles")->capture_default_str();
  c_sw->add_option("--samples", sw.samples, "calibration sequences")->capture_default_str();
  c_sw->add_option("--seed", sw.seed, "sampling seed")->capture_default_str();
  c_sw->add_option("--mode", sweep_mode, "in-per|quamba")->capture_default_str();

  BoundArgs bd;
  std::string dims = "8,4";
  auto* c_b = app.add_subcommand("bound-check", "verify the error-propagation bound on sampled systems");
  c_b->add_option("--a", bd.params.a, "decay envelope a in (0,1)")->capture_default_str();
  c_b->add_option("--b", bd.params.b, "input matrix norm bound")->capture_default_str();
  c_b->add_option("--eps", bd.params.eps, "input perturbation norm")->capture_default_str();
  c_b->add_option("--T", bd.params.T, "sequence length")->capture_default_str();
  c_b->add_option("--dims", dims, "state,input dimensions")->capture_default_str();
  c_b->add_option("--trials", bd.trials, "sampled systems")->capture_default_str();
  c_b->add_option("--seed", bd.seed, "base seed")->capture_default_str();

  SensitivityArgs se;
  auto* c_se = app.add_subcommand("sensitivity", "rank tensors by output deviation when quantized alone");
  c_se->add_option("--model", se.model, "float model")->required()->check(CLI::ExistingFile);
  c_se->add_option("--corpus", se.corpus, "corpus")->required()->check(CLI::ExistingFile);
  c_se->add_option("--samples", se.options.num_samples, "sequences used for deviation")->capture_default_str();
  c_se->add_option("--seed", se.options.seed, "sampling seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    CommandResult r;
    if (*c_init) {
      if (!config_path.empty()) {
        // Explicit flags win over the file.
        ModelConfig from_file;
        apply_config_file(config_path, from_file);
        auto pick = [&](const char* flag, auto& dst, auto file_v) {
          if (c_init->count(flag) == 0) dst = file_v;
        };
        pick("--vocab", init.config.vocab_size, from_file.vocab_size);
        pick("--d-model", init.config.d_model, from_file.d_model);
        pick("--n-layers", init.config.n_layers, from_file.n_layers);
        pick("--expand", init.config.expand, from_file.expand);
        pick("--d-state", init.config.d_state, from_file.d_state);
        pick("--d-conv", init.config.d_conv, from_file.d_conv);
        pick("--dt-rank", init.config.dt_rank, from_file.dt_rank);
        pick("--bits", init.config.bits, from_file.bits);
      }
      r = cmd_init_toy(init, std::cerr);
    } else if (*c_cal) {
      r = cmd_calibrate(cal, std::cerr);
    } else if (*c_q) {
      qa.mode = parse_mode(mode_text);
      r = cmd_quantize(qa, std::cerr);
    } else if (*c_ev) {
      r = cmd_eval(ev, std::cerr);
    } else if (*c_sw) {
      sw.percentiles = parse_list(p_list);
      sw.mode = parse_mode(sweep_mode);
      r = cmd_sweep_percentile(sw, std::cerr);
    } else if (*c_b) {
      const auto d = parse_list(dims);
      if (d.size() != 2 || d[0] < 1 || d[1] < 1 || d[0] != static_cast<double>(static_cast<std::size_t>(d[0])) ||
          d[1] != static_cast<double>(static_cast<std::size_t>(d[1]))) {
        throw Error("--dims expects two positive integers N,P");
      }
      bd.params.N = static_cast<std::size_t>(d[0]);
      bd.params.P = static_cast<std::size_t>(d[1]);
      r = cmd_bound_check(bd, std::cerr);
    } else if (*c_se) {
      r = cmd_sensitivity(se, std::cerr);
    }
    std::cout << r.report.dump(2) << "\n";
    return r.status;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
