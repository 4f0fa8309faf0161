// regdiff command-line tool. Exit codes: 0 ok, 1 invalid flags or config,
// 2 runtime failure (message names the stage).

#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "regdiff/pipeline.hpp"

namespace fs = std::filesystem;
using namespace regdiff;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flag values kept as strings and applied to a RunConfig after parsing, so
// that explicit flags override --config and the data directory's config.
struct Overrides {
  std::map<std::string, std::string> values;  // config key -> value
  std::optional<std::string> dims;
  bool parallel = false, nonparallel = false;
  std::string config_path;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(flag, [this, key](const std::string& v) { values[key] = v; }, help);
  }

  void apply(RunConfig& cfg) const {
    if (parallel && nonparallel) throw UsageError("--parallel and --nonparallel are exclusive");
    if (parallel) cfg.pairing = PairMode::kParallel;
    if (nonparallel) cfg.pairing = PairMode::kNonParallel;
    if (dims) parse_dims(*dims, cfg);
    for (const auto& [k, v] : values) cfg.set(k, v);
  }
};

RunConfig base_config(const Overrides& o, const RunConfig* fallback) {
  RunConfig cfg;
  if (!o.config_path.empty())
    cfg = RunConfig::load(o.config_path);
  else if (fallback)
    cfg = *fallback;
  o.apply(cfg);
  cfg.validate();
  return cfg;
}

void print_report(const EvalReport& r) {
  const auto line = [](const char* dir, const DirectionMetrics& m) {
    std::cout << dir << "  style_accuracy=" << m.style_accuracy << "  semantic_similarity=" << m.semantic_similarity
              << "  validity_rate=" << m.validity_rate << "  n=" << m.count << '\n';
  };
  line("A->B", r.mean_a_to_b());
  line("B->A", r.mean_b_to_a());
  std::cout << "silhouette=" << r.silhouette << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent diffusion style transfer with classifier-regularized training"};
  app.require_subcommand(1);
  Overrides o;
  std::string out, data, vae_path, den_path;

  const auto common = [&](CLI::App* sub) { sub->add_option("--config", o.config_path, "key=value config file")->check(CLI::ExistingFile); };
  const auto data_opt = [&](CLI::App* sub) { sub->add_option("--data", data, "corpus directory (gen-data output)")->required()->check(CLI::ExistingDirectory); };
  const auto sampling = [&](CLI::App* sub) {
    o.add(sub, "--mode", "guidance", "guidance mode: cfg, cg or none");
    o.add(sub, "--gamma", "gamma", "guidance strength");
    o.add(sub, "--ddim-steps", "ddim_steps", "DDIM sampling steps");
    o.add(sub, "--eval-max", "eval_max", "items per direction (0 = all)");
    o.add(sub, "--steps", "steps", "diffusion steps T");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic two-style corpus");
  common(gen);
  gen->add_option("--out", out, "output directory")->required();
  o.add(gen, "--seed", "data_seed", "corpus seed");
  gen->add_flag("--parallel", o.parallel, "paired sentences (default)");
  gen->add_flag("--nonparallel", o.nonparallel, "unpaired sentences");
  o.add(gen, "--pairs", "pairs", "training examples");

  auto* tv = app.add_subcommand("train-vae", "train the VAE and latent classifier");
  common(tv);
  data_opt(tv);
  tv->add_option("--out", out, "output directory")->required();
  o.add(tv, "--seed", "seeds", "training seed");
  o.add(tv, "--epochs", "vae_epochs", "training epochs");
  o.add(tv, "--lr", "vae_lr", "learning rate");
  tv->add_option("--dims", o.dims, "latent,vae,denoiser widths");
  o.add(tv, "--vae-beta", "vae_beta", "classifier loss weight");

  auto* td = app.add_subcommand("train-diff", "train the denoiser on frozen VAE latents");
  common(td);
  data_opt(td);
  td->add_option("--vae", vae_path, "VAE checkpoint")->required()->check(CLI::ExistingFile);
  td->add_option("--out", out, "output directory")->required();
  o.add(td, "--seed", "seeds", "training seed");
  o.add(td, "--lambda", "lambdas", "classifier regularization weight");
  o.add(td, "--epochs", "diff_epochs", "training epochs");
  o.add(td, "--lr", "diff_lr", "learning rate");
  td->add_option("--dims", o.dims, "latent,vae,denoiser widths");
  o.add(td, "--steps", "steps", "diffusion steps T");
  o.add(td, "--p-drop", "p_drop", "condition dropout probability");

  auto* sm = app.add_subcommand("sample", "restyle the test split and write JSON lines");
  common(sm);
  data_opt(sm);
  sm->add_option("--vae", vae_path, "VAE checkpoint")->required()->check(CLI::ExistingFile);
  sm->add_option("--denoiser", den_path, "denoiser checkpoint")->required()->check(CLI::ExistingFile);
  sm->add_option("--out", out, "output file")->required();
  o.add(sm, "--seed", "seeds", "sampling seed");
  sampling(sm);

  auto* ev = app.add_subcommand("eval", "evaluate a trained model pair on the test split");
  common(ev);
  data_opt(ev);
  ev->add_option("--vae", vae_path, "VAE checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--denoiser", den_path, "denoiser checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", out, "output directory")->required();
  o.add(ev, "--seeds", "seeds", "comma-separated sampling seeds");
  sampling(ev);

  auto* ex = app.add_subcommand("export-emb", "write PCA-projected pooled latents as CSV");
  common(ex);
  data_opt(ex);
  ex->add_option("--vae", vae_path, "VAE checkpoint")->required()->check(CLI::ExistingFile);
  ex->add_option("--out", out, "output CSV")->required();

  auto* pl = app.add_subcommand("pipeline", "run every stage over a lambda grid and seeds");
  common(pl);
  pl->add_option("--out", out, "output directory")->required();
  o.add(pl, "--seeds", "seeds", "comma-separated seeds");
  o.add(pl, "--lambdas", "lambdas", "comma-separated lambda grid");
  o.add(pl, "--epochs", "diff_epochs", "diffusion epochs");
  o.add(pl, "--vae-epochs", "vae_epochs", "VAE epochs");
  o.add(pl, "--lr", "diff_lr", "diffusion learning rate");
  pl->add_option("--dims", o.dims, "latent,vae,denoiser widths");
  pl->add_flag("--parallel", o.parallel, "paired sentences (default)");
  pl->add_flag("--nonparallel", o.nonparallel, "unpaired sentences");
  o.add(pl, "--pairs", "pairs", "training examples");
  o.add(pl, "--vae-beta", "vae_beta", "VAE classifier loss weight");
  sampling(pl);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  CLI::App* used = app.get_subcommands().front();
  const std::string name = used->get_name();
  RunConfig cfg;
  std::optional<LoadedData> loaded;
  try {
    if (!data.empty()) {
      loaded.emplace(load_data(data));
      cfg = base_config(o, &loaded->config);
    } else {
      cfg = base_config(o, nullptr);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: invalid configuration: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error [" << name << "]: " << e.what() << '\n';
    return 2;
  }

  try {
    if (name == "gen-data") {
      const auto splits = stage_gen_data(cfg, out);
      std::cout << "wrote " << splits.train.size() << "/" << splits.val.size() << "/" << splits.test.size()
                << " examples to " << out << '\n';
    } else if (name == "train-vae") {
      const VaeModel vae = stage_train_vae(cfg, *loaded, out, cfg.seeds.front());
      std::vector<Tokens> test;
      for (const auto& lt : vae_corpus(loaded->splits.test)) test.push_back(lt.tokens);
      std::cout << "reconstruction_accuracy=" << reconstruction_accuracy(vae, test) << '\n'
                << "latent_classifier_accuracy=" << latent_classifier_accuracy(vae, vae_corpus(loaded->splits.test))
                << '\n';
    } else if (name == "train-diff") {
      const VaeModel vae = load_vae(vae_path);
      cfg.latent_dim = vae.config().latent_dim;
      stage_train_diff(cfg, *loaded, vae, out, cfg.lambdas.front(), cfg.seeds.front());
      std::cout << "wrote " << (fs::path(out) / "denoiser.ckpt").string() << '\n';
    } else if (name == "sample" || name == "eval") {
      const VaeModel vae = load_vae(vae_path);
      const DenoiserModel den = load_denoiser(den_path);
      cfg.steps = den.config().steps;
      SamplingStats timing;
      if (name == "sample") {
        stage_sample(cfg, *loaded, vae, den, out, cfg.seeds.front(), &timing);
      } else {
        print_report(stage_eval(cfg, *loaded, vae, den, out, &timing));
        cfg.save(fs::path(out) / kConfigFile);
      }
      std::cout << "guidance=" << to_string(cfg.guidance) << " seconds_per_step=" << timing.seconds_per_step() << '\n';
    } else if (name == "export-emb") {
      stage_export(*loaded, load_vae(vae_path), out);
    } else if (name == "pipeline") {
      for (const auto& r : run_pipeline(cfg, out, std::cerr))
        std::cout << "lambda=" << format_lambda(r.lambda) << ' ' << r.direction
                  << " style_accuracy=" << r.metrics.style_accuracy
                  << " semantic_similarity=" << r.metrics.semantic_similarity
                  << " validity_rate=" << r.metrics.validity_rate << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error [" << name << "]: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
