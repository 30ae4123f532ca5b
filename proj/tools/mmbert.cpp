// mmbert command-line tool: data generation, staged training, evaluation,
// routing analysis, ablations and the gradient self-check.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mmbert/ablation.hpp"
#include "mmbert/checkpoint.hpp"
#include "mmbert/diagnostics.hpp"

namespace fs = std::filesystem;
using namespace mmbert;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

/// Emits to `out` when given, stdout otherwise.
void emit(const std::string& out, const std::string& text) {
  if (out.empty()) std::cout << text;
  else write_text(out, text);
}

RunConfig config_from(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

/// A data argument is either a split file or a directory holding
/// `<name>.tsv`.
fs::path data_file(const std::string& data, const std::string& name) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= name + ".tsv";
  if (!fs::exists(p)) throw IoError("data file '" + p.string() + "' not found");
  return p;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<double> balance;
};

void gen_data(const GenDataArgs& a) {
  RunConfig cfg = config_from(a.config, a.seed);
  if (a.balance) cfg.corpus.balance = *a.balance;
  ensure_dir(a.out);
  auto exp = make_experiment(cfg);
  const fs::path out(a.out);
  std::vector<MultimodalSample> corpus;
  for (const auto* part : {&exp.splits.train, &exp.splits.val, &exp.splits.test})
    corpus.insert(corpus.end(), part->begin(), part->end());
  std::sort(corpus.begin(), corpus.end(), [](const auto& x, const auto& y) { return x.id < y.id; });
  write_corpus((out / "corpus.tsv").string(), corpus);
  write_corpus((out / "train.tsv").string(), exp.splits.train);
  write_corpus((out / "val.tsv").string(), exp.splits.val);
  write_corpus((out / "test.tsv").string(), exp.splits.test);
  write_text(out / "config.txt", format_config(cfg));
  std::printf("wrote %zu samples (train %zu, val %zu, test %zu) to %s\n", corpus.size(), exp.splits.train.size(),
              exp.splits.val.size(), exp.splits.test.size(), a.out.c_str());
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string stage = "all", config, data, out;
  std::optional<std::uint64_t> seed;
};

void train(const TrainArgs& a) {
  const RunConfig base = config_from(a.config, a.seed);
  const auto env = make_environment(base);
  const auto train_set = encode_all<float>(read_corpus(data_file(a.data, "train").string()), env.encoders);
  const auto val_set = encode_all<float>(read_corpus(data_file(a.data, "val").string()), env.encoders);
  ensure_dir(a.out);
  const fs::path out(a.out);

  std::vector<int> stages;
  if (a.stage == "all") {
    if (env.cfg.train.stage0) stages.push_back(0);
    stages.insert(stages.end(), {1, 2, 3});
  } else if (a.stage == "0" || a.stage == "1" || a.stage == "2" || a.stage == "3") {
    stages.push_back(a.stage[0] - '0');
  } else {
    throw ArgumentError("--stage must be all, 0, 1, 2 or 3 (got '" + a.stage + "')");
  }
  if (stages.front() == 0 && !env.cfg.train.stage0) throw ConfigError("stage 0 requested but train.stage0 is false");

  MMBertModel<float> model;
  const int first = stages.front();
  const int prior = first == 1 && !env.cfg.train.stage0 ? -1 : first - 1;
  if (prior >= 0) {
    const auto ckpt = out / ("stage" + std::to_string(prior) + ".ckpt");
    if (!fs::exists(ckpt))
      throw StageDependencyError("stage " + std::to_string(first) + " needs " + ckpt.string() +
                                 "; run the earlier stages first");
    auto saved = load_checkpoint(ckpt.string());
    if (saved.cfg.model.vocab_size != env.cfg.model.vocab_size || format_config(saved.cfg) != format_config(env.cfg))
      throw StageDependencyError(ckpt.string() + " was written with a different configuration");
    model = saved.model;
  } else {
    model = MMBertModel<float>(env.cfg.model, env.cfg.seed);
  }
  model.set_gate_capture(env.cfg.gate_capture);

  Trainer<float> trainer(model, env.cfg.train, env.cfg.seed);
  for (int s : stages) {
    std::vector<StageResult> results;
    switch (s) {
      case 0: results.push_back(trainer.stage0(train_set, val_set)); break;
      case 1:
        if (model.config().n_experts() > 1) results.push_back(trainer.stage1(train_set, val_set));
        break;
      case 2: results = trainer.stage2(train_set, val_set); break;
      case 3: results.push_back(trainer.stage3(train_set, val_set)); break;
    }
    save_checkpoint((out / ("stage" + std::to_string(s) + ".ckpt")).string(), env.cfg, std::to_string(s), model,
                    env.encoders);
    for (const auto& r : results)
      std::printf("stage %s: epochs %zu, train loss %.4f -> %.4f, best val loss %.4f%s\n", r.stage.c_str(),
                  r.epochs_run, r.initial_train_loss, r.final_train_loss, r.best_val_loss,
                  r.early_stopped ? " (early stop)" : "");
  }
  const std::string log_name = a.stage == "all" ? "train_log.csv" : "train_log_stage" + a.stage + ".csv";
  write_text(out / log_name, trainer.log().to_csv());
}

// ---------------------------------------------------------------------------

std::string metrics_csv_header() { return "run,dataset,slice,acc,prec,rec,f1\n"; }

std::string metrics_csv_row(const std::string& run, const std::string& dataset, const std::string& slice,
                             const Metrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%s,%s,%.6f,%.6f,%.6f,%.6f\n", run.c_str(), dataset.c_str(), slice.c_str(),
                m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1);
  return buf;
}

struct EvalArgs {
  std::string ckpt, data, slice = "all", out, run;
};

void eval(const EvalArgs& a) {
  auto saved = load_checkpoint(a.ckpt);
  const auto path = data_file(a.data, "test");
  auto samples = read_corpus(path.string());
  if (a.slice == "perturbed") {
    samples = perturbed_only(samples);
  } else if (a.slice != "all") {
    samples = slice_by_tag(samples, parse_perturbation(a.slice));
  }
  if (samples.empty()) throw ArgumentError("slice '" + a.slice + "' of " + path.string() + " is empty");
  const auto data = encode_all<float>(samples, saved.encoders);
  const auto m = evaluate<float>(saved.model, data);
  const std::string run = a.run.empty() ? fs::path(a.ckpt).stem().string() : a.run;
  emit(a.out, metrics_csv_header() + metrics_csv_row(run, path.stem().string(), a.slice, m));
}

struct RouteArgs {
  std::string ckpt, data, out;
};

void route_analyze(const RouteArgs& a) {
  auto saved = load_checkpoint(a.ckpt);
  const auto data = encode_all<float>(read_corpus(data_file(a.data, "test").string()), saved.encoders);
  const auto prof = routing_profile<float>(saved.model, data);
  std::string csv = "tag,layer,expert,mean_gate\n";
  char buf[256];
  for (const auto& [tag, layers] : prof.mean_gate)
    for (std::size_t l = 0; l < layers.size(); ++l)
      for (std::size_t e = 0; e < layers[l].size(); ++e) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%s,%.6f\n", to_string(tag), l, to_string(prof.experts[e]), layers[l][e]);
        csv += buf;
      }
  emit(a.out, csv);
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string kind, config, out;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

void ablate(const AblateArgs& a) {
  const RunConfig base = config_from(a.config, std::nullopt);
  std::vector<RunOutcome> runs;
  if (a.kind == "stages") runs = ablate_stages(base, a.seeds);
  else if (a.kind == "modalities") runs = ablate_modalities(base, a.seeds);
  else throw ArgumentError("--kind must be stages or modalities (got '" + a.kind + "')");
  ensure_dir(a.out);
  const fs::path out(a.out);
  write_text(out / "ablation.csv", ablation_csv(runs));
  std::string metrics = metrics_csv_header();
  for (const auto& r : runs) {
    const std::string run = r.variant + "/seed" + std::to_string(r.seed);
    write_text(out / (r.variant + "_seed" + std::to_string(r.seed) + "_log.csv"), r.training.log.to_csv());
    metrics += metrics_csv_row(run, "test", "all", r.test);
    if (r.test_perturbed.confusion.total()) metrics += metrics_csv_row(run, "test", "perturbed", r.test_perturbed);
    if (r.test_homophone_codemix.confusion.total())
      metrics += metrics_csv_row(run, "test", "homophone+codemix", r.test_homophone_codemix);
  }
  write_text(out / "metrics.csv", metrics);
  std::cout << ablation_csv(runs);
}

// ---------------------------------------------------------------------------

int gradcheck(const std::string& size) {
  if (size != "tiny") throw ArgumentError("--size supports only 'tiny' (got '" + size + "')");
  const auto r = tiny_model_gradcheck();
  std::printf("coordinates %zu, max relative error %.3e (worst %s[%zu]: analytic %.6e, numeric %.6e)\n",
              r.coordinates, r.max_rel_error, r.worst_param.c_str(), r.worst_index, r.worst_analytic, r.worst_numeric);
  if (r.max_rel_error >= 1e-3) {
    std::fprintf(stderr, "error:numeric: gradient check failed, max relative error %.3e >= 1e-3\n", r.max_rel_error);
    return 1;
  }
  return 0;
}

void params(const std::string& config) {
  const auto env = make_environment(config_from(config, std::nullopt));
  MMBertModel<float> model(env.cfg.model, env.cfg.seed);
  const auto& m = env.cfg.model;
  std::cout << param_count_report(count_parameters(model), m.n_layers, m.d_model, m.d_ff);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal mixture-of-experts encoder for cloaked toxic text (synthetic desk-scale build)"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic corpus and its train/val/test split");
  c_gen->add_option("--config", gd.config, "Config file (key = value lines)");
  c_gen->add_option("--seed", gd.seed, "Root seed (overrides the config)");
  c_gen->add_option("--out", gd.out, "Output directory")->required();
  c_gen->add_option("--balance", gd.balance, "Fraction of positive samples");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Run training stages");
  c_train->add_option("--stage", tr.stage, "all, 0, 1, 2 or 3")->check(CLI::IsMember({"all", "0", "1", "2", "3"}));
  c_train->add_option("--config", tr.config, "Config file");
  c_train->add_option("--seed", tr.seed, "Root seed (overrides the config)");
  c_train->add_option("--data", tr.data, "Directory with train.tsv and val.tsv")->required();
  c_train->add_option("--out", tr.out, "Output directory for checkpoints and logs")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  c_eval->add_option("--data", ev.data, "Split file or data directory (uses test.tsv)")->required();
  c_eval->add_option("--slice", ev.slice, "all, perturbed, none, homophone, codemix, deform or abbreviation");
  c_eval->add_option("--run", ev.run, "Run name in the CSV (default: checkpoint stem)");
  c_eval->add_option("--out", ev.out, "CSV path (default: stdout)");

  RouteArgs ra;
  auto* c_route = app.add_subcommand("route-analyze", "Mean gate per tag, layer and expert");
  c_route->add_option("--ckpt", ra.ckpt, "Checkpoint file")->required();
  c_route->add_option("--data", ra.data, "Split file or data directory (uses test.tsv)")->required();
  c_route->add_option("--out", ra.out, "CSV path (default: stdout)");

  AblateArgs ab;
  auto* c_ablate = app.add_subcommand("ablate", "Stage or modality ablation over several seeds");
  c_ablate->add_option("--kind", ab.kind, "stages or modalities")->required();
  c_ablate->add_option("--config", ab.config, "Config file");
  c_ablate->add_option("--seeds", ab.seeds, "Seeds")->delimiter(',');
  c_ablate->add_option("--out", ab.out, "Output directory")->required();

  std::string gc_size = "tiny";
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of the full routed loss");
  c_grad->add_option("--size", gc_size, "Model size (tiny)");

  std::string pc_config;
  auto* c_params = app.add_subcommand("params", "Parameter counts per component");
  c_params->add_option("--config", pc_config, "Config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::fprintf(stderr, "error:usage: %s\n", msg.c_str());
    return 2;
  }

  try {
    if (*c_gen) gen_data(gd);
    else if (*c_train) train(tr);
    else if (*c_eval) eval(ev);
    else if (*c_route) route_analyze(ra);
    else if (*c_ablate) ablate(ab);
    else if (*c_grad) return gradcheck(gc_size);
    else if (*c_params) params(pc_config);
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::fprintf(stderr, "error:%s: %s\n", e.kind().c_str(), msg.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error:internal: %s\n", e.what());
    return 3;
  }
  return 0;
}
