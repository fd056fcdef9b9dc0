// muse: command-line entry point for data generation, training, guided
// generation and editing, calibration and evaluation.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
// Failures also print one JSON line on stderr: {"error": ..., "message": ...}.

#include "muse/checkpoint.hpp"
#include "muse/eval.hpp"
#include "muse/png_io.hpp"
#include "muse/run_config.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace muse;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double parse_real(const std::string& s) {
  try {
    return real_from_json(json::parse(s));
  } catch (const json::exception&) {
    return real_from_json(json(s));
  }
}

// Options shared by every subcommand that reads a run config. Flags win over
// the config file.
struct Common {
  std::string config;
  std::string models;
  std::optional<std::uint64_t> seed;
  std::string eta;
  std::optional<double> omega;
  std::optional<int> steps;
  std::optional<int> max_inner;
  std::optional<double> lambda1, lambda2;
  std::string lr_schedule;

  void add(CLI::App* app) {
    app->add_option("--config", config, "run config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--models", models, "directory holding the model checkpoints");
    app->add_option("--seed", seed, "run seed");
    app->add_option("--eta", eta, "gate threshold (number, inf or -inf)");
    app->add_option("--omega", omega, "classifier-free guidance scale");
    app->add_option("--steps", steps, "DDIM steps");
    app->add_option("--max-inner", max_inner, "inner iteration cap");
    app->add_option("--lambda1", lambda1, "inherent-emotion suppression weight");
    app->add_option("--lambda2", lambda2, "similar-emotion suppression weight");
    app->add_option("--lr-schedule", lr_schedule, "inner or timestep")->check(CLI::IsMember({"inner", "timestep"}));
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : RunConfig::load(config);
    if (!models.empty()) {
      const fs::path d(models);
      c.models.denoiser = (d / "denoiser.ckpt").string();
      c.models.classifier = (d / "classifier_guide.ckpt").string();
      c.models.agnostic = (d / "classifier_agnostic.ckpt").string();
      c.models.reduced = fs::exists(d / "classifier_reduced.ckpt") ? (d / "classifier_reduced.ckpt").string() : "";
      c.models.embedder = (d / "embedder.ckpt").string();
      if (fs::exists(d / "wheel.json")) c.models.wheel = (d / "wheel.json").string();
    }
    if (seed) c.seed = *seed;
    if (!eta.empty()) c.guidance.eta = parse_real(eta);
    if (omega) c.guidance.omega = *omega;
    if (steps) c.guidance.steps = *steps;
    if (max_inner) c.guidance.max_inner = *max_inner;
    if (lambda1) c.guidance.lambda1 = *lambda1;
    if (lambda2) c.guidance.lambda2 = *lambda2;
    if (lr_schedule == "inner") c.guidance.lr_schedule = LrSchedule::inner;
    if (lr_schedule == "timestep") c.guidance.lr_schedule = LrSchedule::timestep;
    c.validate();
    return c;
  }
};

struct Models {
  Denoiser<float> denoiser;
  EmotionClassifier<float> guide;
  EmotionClassifier<float> agnostic;
  std::optional<EmotionClassifier<float>> reduced;
  JointEmbedder<float> embedder;
  EmotionWheel wheel;

  static Models load(const RunConfig& c, bool need_eval_classifiers) {
    Models m{load_denoiser(c.models.denoiser), load_classifier(c.models.classifier), {}, std::nullopt,
             load_embedder(c.models.embedder), c.models.wheel.empty() ? EmotionWheel{} : EmotionWheel::load(c.models.wheel)};
    if (need_eval_classifiers) {
      m.agnostic = load_classifier(c.models.agnostic);
      if (!c.models.reduced.empty()) m.reduced = load_classifier(c.models.reduced);
    }
    return m;
  }

  GuidanceModels guidance() const { return {&denoiser, &guide, &embedder, &wheel}; }
  EvalModels eval() const { return {guidance(), &agnostic, reduced ? &*reduced : nullptr}; }
};

Emotion parse_emotion(const std::string& s) {
  const auto e = emotion_from_name(s);
  if (!e) throw UsageError("unknown emotion '" + s + "'");
  return *e;
}

fs::path sidecar(const fs::path& file, const std::string& suffix) {
  fs::path p = file;
  p.replace_extension(suffix);
  return p;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// (image, prompt, target) sets written by gen-set and read by eval.
struct ImageSet {
  std::vector<MatF> images;
  std::vector<PromptTokens> prompts;
  std::vector<Emotion> targets;
};

void save_set(const fs::path& dir, const std::vector<GenerationJob>& jobs, const std::vector<MatF>& images,
              const std::vector<SynthesisTrace>* traces) {
  fs::create_directories(dir);
  std::ofstream index(dir / "index.jsonl");
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%05zu", i);
    write_png(dir / (std::string(name) + ".png"), images[i], kImageSize, kImageSize);
    if (traces) (*traces)[i].write_jsonl(dir / (std::string(name) + ".trace.jsonl"));
    index << json{{"file", std::string(name) + ".png"},
                  {"prompt", detokenize(jobs[i].resolved_prompt())},
                  {"target", emotion_name(jobs[i].target)},
                  {"seed", jobs[i].seed}}
                 .dump()
          << '\n';
  }
}

ImageSet load_set(const fs::path& dir) {
  std::ifstream index(dir / "index.jsonl");
  if (!index) throw Error("no index.jsonl in " + dir.string());
  ImageSet s;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    s.images.push_back(read_png(dir / j.at("file").get<std::string>()));
    s.prompts.push_back(tokenize(j.at("prompt").get<std::string>(), true));
    s.targets.push_back(parse_emotion(j.at("target").get<std::string>()));
  }
  if (s.images.empty()) throw Error("empty image set " + dir.string());
  return s;
}

MatD reference_features(const fs::path& dir, const JointEmbedder<float>& embedder) {
  const auto data = load_dataset(dir);
  std::vector<MatF> images;
  for (const auto& s : data.samples) images.push_back(s.image);
  return image_features(images, embedder);
}

std::pair<GlyphDataset, GlyphDataset> split(const GlyphDataset& data, int heldout) {
  if (static_cast<std::size_t>(heldout) >= data.samples.size()) {
    throw UsageError("dataset has " + std::to_string(data.samples.size()) + " samples, fewer than train.heldout + 1");
  }
  GlyphDataset train, held;
  const auto cut = data.samples.size() - static_cast<std::size_t>(heldout);
  train.samples.assign(data.samples.begin(), data.samples.begin() + static_cast<std::ptrdiff_t>(cut));
  held.samples.assign(data.samples.begin() + static_cast<std::ptrdiff_t>(cut), data.samples.end());
  return {std::move(train), std::move(held)};
}

void print_report(const TrainReport& r, const std::string& metric) {
  std::cout << "epochs " << r.epoch_loss.size() << " final_loss " << (r.epoch_loss.empty() ? 0.0 : r.epoch_loss.back())
            << ' ' << metric << ' ' << r.heldout_metric << '\n';
}

int run(int argc, char** argv) {
  CLI::App app{"Test-time emotional guidance on a toy diffusion stack"};
  app.require_subcommand(1);

  // data gen
  auto* data = app.add_subcommand("data", "dataset utilities");
  data->require_subcommand(1);
  auto* data_gen = data->add_subcommand("gen", "generate an emotive-glyph dataset");
  int n = 8000;
  double rho = 0.8;
  std::uint64_t data_seed = 1;
  std::string out;
  data_gen->add_option("--n", n, "number of images (multiple of 8)");
  data_gen->add_option("--rho", rho, "shape-emotion correlation in [0, 1]");
  data_gen->add_option("--seed", data_seed, "generator seed");
  data_gen->add_option("--out", out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train one model on a dataset directory");
  Common train_common;
  std::string kind, data_dir, arch;
  std::optional<double> fraction;
  train->add_option("kind", kind, "denoiser, classifier or embedder")
      ->required()
      ->check(CLI::IsMember({"denoiser", "classifier", "embedder"}));
  train->add_option("--data", data_dir, "dataset directory");
  train->add_option("--out", out, "checkpoint path")->required();
  train->add_option("--arch", arch, "classifier architecture")->check(CLI::IsMember({"guide", "agnostic"}));
  train->add_option("--fraction", fraction, "share of the training split used by a classifier");
  train_common.add(train);

  // calibrate-eta
  auto* calib = app.add_subcommand("calibrate-eta", "set eta to a percentile of vanilla s_clip values");
  Common calib_common;
  std::optional<double> percentile;
  calib->add_option("--data", data_dir, "dataset directory; its trailing held-out prompts are used");
  calib->add_option("--percentile", percentile, "percentile in [0, 100]");
  calib->add_option("--out", out, "where to write the calibrated config")->required();
  calib_common.add(calib);

  // gen
  auto* gen = app.add_subcommand("gen", "generate one image");
  Common gen_common;
  std::string prompt, emotion, sampler = "muse";
  bool emotion_only = false;
  gen->add_option("--prompt", prompt, "neutral prompt");
  gen->add_flag("--emotion-only", emotion_only, "use the 'an image of <emotion>' template");
  gen->add_option("--emotion", emotion, "target emotion")->required();
  gen->add_option("--sampler", sampler, "muse, vanilla or cg")->check(CLI::IsMember({"muse", "vanilla", "cg"}));
  gen->add_option("--out", out, "output PNG")->required();
  gen_common.add(gen);

  // edit
  auto* edit_cmd = app.add_subcommand("edit", "edit an image toward a target emotion");
  Common edit_common;
  std::string image_path;
  edit_cmd->add_option("--image", image_path, "source PNG")->required()->check(CLI::ExistingFile);
  edit_cmd->add_option("--prompt", prompt, "prompt describing the source")->required();
  edit_cmd->add_option("--emotion", emotion, "target emotion")->required();
  edit_cmd->add_option("--out", out, "output PNG")->required();
  edit_common.add(edit_cmd);

  // gen-set
  auto* gen_set = app.add_subcommand("gen-set", "generate the neutral-prompt set (every seed x all 8 targets)");
  Common set_common;
  std::string condition = "muse";
  std::optional<int> set_seeds;
  gen_set->add_option("--condition", condition, "muse, vanilla or cg")->check(CLI::IsMember({"muse", "vanilla", "cg"}));
  gen_set->add_option("--n", set_seeds, "seeds per target");
  gen_set->add_option("--out", out, "output directory")->required();
  set_common.add(gen_set);

  // eval
  auto* eval = app.add_subcommand("eval", "metrics of image sets against a reference dataset");
  Common eval_common;
  std::vector<std::string> sets;
  std::string ref;
  eval->add_option("--set", sets, "set directories written by gen-set")->required();
  eval->add_option("--ref", ref, "reference dataset directory")->required();
  eval->add_option("--out", out, "CSV report")->required();
  eval_common.add(eval);

  // sweep-eta
  auto* sweep = app.add_subcommand("sweep-eta", "accuracy and semantic score across gate thresholds");
  Common sweep_common;
  std::string grid;
  std::optional<int> sweep_seeds;
  sweep->add_option("--grid", grid, "comma-separated ascending eta values (inf allowed)");
  sweep->add_option("--n", sweep_seeds, "seeds per target");
  sweep->add_option("--ref", ref, "reference dataset directory")->required();
  sweep->add_option("--out", out, "output directory")->required();
  sweep_common.add(sweep);

  // ablate-losses
  auto* ablate = app.add_subcommand("ablate-losses", "target-only, +L_sim, +L_inh and full loss");
  Common ablate_common;
  std::optional<int> ablate_seeds;
  ablate->add_option("--n", ablate_seeds, "seeds per target");
  ablate->add_option("--out", out, "output directory")->required();
  ablate_common.add(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    throw UsageError(e.what());
  }

  if (data_gen->parsed()) {
    const auto d = generate_dataset(n, rho, data_seed);
    save_dataset(d, out);
    RunConfig c;
    c.seed = data_seed;
    c.data = out;
    json meta = {{"n", n}, {"rho", rho}, {"seed", data_seed}, {"hash", d.hash()}};
    std::ofstream(fs::path(out) / "dataset.json") << meta.dump(2) << '\n';
    std::cout << "wrote " << n << " images to " << out << '\n';
    return 0;
  }

  if (train->parsed()) {
    RunConfig c = train_common.resolve();
    if (!data_dir.empty()) c.data = data_dir;
    if (!arch.empty()) c.train.classifier_arch = arch_from_name(arch);
    if (fraction) c.train.classifier_fraction = *fraction;
    c.validate();
    auto [tr, held] = split(load_dataset(c.data), c.train.heldout);
    ensure_parent(out);
    if (kind == "denoiser") {
      auto cfg = c.train.denoiser;
      cfg.verbose = true;
      auto r = train_denoiser(tr, held, c.denoiser, cfg, c.seed);
      save_denoiser(out, r.model, r.report);
      print_report(r.report, "heldout_mse");
    } else if (kind == "classifier") {
      const auto keep = static_cast<std::size_t>(std::llround(c.train.classifier_fraction * static_cast<double>(tr.samples.size())));
      tr.samples.resize(std::max<std::size_t>(keep, 1));
      auto cfg = c.train.classifier;
      cfg.verbose = true;
      auto r = train_classifier(tr, held, c.train.classifier_arch, cfg, c.seed);
      save_classifier(out, r.model, r.report);
      print_report(r.report, "heldout_accuracy");
    } else {
      auto cfg = c.train.embedder;
      cfg.verbose = true;
      auto r = train_embedder(tr, held, c.embedder, cfg, c.seed);
      save_embedder(out, r.model, r.report);
      print_report(r.report, "heldout_retrieval");
    }
    c.save(sidecar(out, ".config.json"));
    return 0;
  }

  if (calib->parsed()) {
    RunConfig c = calib_common.resolve();
    if (!data_dir.empty()) c.data = data_dir;
    if (percentile) c.eval.eta_percentile = *percentile;
    c.validate();
    const Models m = Models::load(c, false);
    const auto [tr, held] = split(load_dataset(c.data), c.train.heldout);
    std::vector<PromptTokens> prompts;
    for (std::size_t i = 0; i < held.samples.size() && static_cast<int>(prompts.size()) < c.eval.prompts; ++i) {
      prompts.push_back(held.samples[i].tokens);
    }
    c.guidance.eta = calibrate_eta(prompts, m.guidance(), c.guidance, c.eval.eta_percentile, c.seed);
    c.save(out);
    std::cout << "eta " << json(c.guidance.eta).dump() << '\n';
    return 0;
  }

  if (gen->parsed()) {
    RunConfig c = gen_common.resolve();
    if (emotion_only == !prompt.empty()) throw UsageError("gen needs exactly one of --prompt and --emotion-only");
    const Emotion target = parse_emotion(emotion);
    const std::optional<PromptTokens> p = emotion_only ? std::nullopt : std::optional(tokenize(prompt));
    const Models m = Models::load(c, false);
    ensure_parent(out);
    if (sampler == "muse") {
      try {
        const auto r = generate(p, target, m.guidance(), c.guidance, c.seed);
        write_png(out, r.image, kImageSize, kImageSize);
        r.trace.write_jsonl(sidecar(out, ".trace.jsonl"));
      } catch (const SynthesisAborted& e) {
        e.partial.write_jsonl(sidecar(out, ".trace.jsonl"));
        throw;
      }
    } else {
      std::mt19937_64 rng(c.seed);
      const MatF z = gaussian_latent(rng);
      const PromptTokens tokens = p ? *p : template_prompt(target);
      const MatF x = sampler == "vanilla"
                         ? sample_vanilla(z, tokens, m.denoiser, c.guidance)
                         : sample_classifier_guidance(z, tokens, target, m.denoiser, m.guide, c.guidance, c.eval.cg_scale);
      write_png(out, x, kImageSize, kImageSize);
    }
    c.save(sidecar(out, ".config.json"));
    return 0;
  }

  if (edit_cmd->parsed()) {
    RunConfig c = edit_common.resolve();
    const Models m = Models::load(c, false);
    int h = 0, w = 0;
    const MatF src = read_png(image_path, &h, &w);
    if (h != kImageSize || w != kImageSize) throw UsageError("edit expects a 32x32 image");
    ensure_parent(out);
    const auto r = edit(src, tokenize(prompt), parse_emotion(emotion), m.guidance(), c.guidance, c.seed);
    write_png(out, r.image, kImageSize, kImageSize);
    r.trace.write_jsonl(sidecar(out, ".trace.jsonl"));
    c.save(sidecar(out, ".config.json"));
    return 0;
  }

  if (gen_set->parsed()) {
    RunConfig c = set_common.resolve();
    if (set_seeds) c.eval.seeds = *set_seeds;
    c.validate();
    const Models m = Models::load(c, false);
    const auto jobs = all_target_jobs(neutral_prompts(c.eval.prompts, c.seed), c.eval.seeds, c.eval.base_seed);
    if (condition == "muse") {
      const auto o = run_guided(jobs, m.guidance(), c.guidance);
      save_set(out, jobs, o.images, &o.traces);
    } else if (condition == "vanilla") {
      save_set(out, jobs, run_vanilla(jobs, m.denoiser, c.guidance), nullptr);
    } else {
      std::vector<MatF> images;
      for (const auto& j : jobs) {
        std::mt19937_64 rng(j.seed);
        const MatF z = gaussian_latent(rng);
        images.push_back(sample_classifier_guidance(z, j.resolved_prompt(), j.target, m.denoiser, m.guide, c.guidance,
                                                    c.eval.cg_scale));
      }
      save_set(out, jobs, images, nullptr);
    }
    c.save(fs::path(out) / "config.json");
    return 0;
  }

  if (eval->parsed()) {
    RunConfig c = eval_common.resolve();
    const Models m = Models::load(c, true);
    const MatD reference = reference_features(ref, m.embedder);
    EvalReport report;
    report.config_hash = c.hash();
    for (const auto& dir : sets) {
      const auto s = load_set(dir);
      report.rows.push_back(
          evaluate_set(fs::path(dir).filename().string(), s.images, s.targets, s.prompts, reference, m.eval()));
    }
    ensure_parent(out);
    report.write_csv(out);
    c.save(sidecar(out, ".config.json"));
    return 0;
  }

  if (sweep->parsed()) {
    RunConfig c = sweep_common.resolve();
    if (sweep_seeds) c.eval.seeds = *sweep_seeds;
    if (!grid.empty()) {
      c.eval.eta_grid.clear();
      std::stringstream ss(grid);
      std::string item;
      while (std::getline(ss, item, ',')) c.eval.eta_grid.push_back(parse_real(item));
    }
    c.validate();
    const Models m = Models::load(c, true);
    if (c.eval.eta_grid.empty()) {
      const double inf = std::numeric_limits<double>::infinity();
      const auto prompts = neutral_prompts(c.eval.prompts, c.seed);
      c.eval.eta_grid = {-inf, calibrate_eta(prompts, m.guidance(), c.guidance, 30, c.seed),
                         calibrate_eta(prompts, m.guidance(), c.guidance, 60, c.seed),
                         calibrate_eta(prompts, m.guidance(), c.guidance, 90, c.seed), inf};
    }
    const auto jobs = all_target_jobs(neutral_prompts(c.eval.prompts, c.seed), c.eval.seeds, c.eval.base_seed);
    const auto result = sweep_eta(c.eval.eta_grid, jobs, reference_features(ref, m.embedder), m.eval(), c.guidance, c.hash());
    fs::create_directories(out);
    result.write_csv(fs::path(out) / "sweep_eta.csv");
    plot_eta_sweep(result, fs::path(out) / "sweep_eta.png");
    c.save(fs::path(out) / "config.json");
    std::cout << "rho_accuracy " << result.rho_accuracy << " rho_semantic " << result.rho_semantic << '\n';
    return 0;
  }

  if (ablate->parsed()) {
    RunConfig c = ablate_common.resolve();
    if (ablate_seeds) c.eval.ablation_seeds = *ablate_seeds;
    c.validate();
    const Models m = Models::load(c, true);
    const auto jobs = all_target_jobs(neutral_prompts(c.eval.prompts, c.seed), c.eval.ablation_seeds, c.eval.base_seed);
    const auto report = ablate_losses(jobs, m.eval(), c.guidance, c.hash());
    fs::create_directories(out);
    report.write_csv(fs::path(out) / "ablation.csv");
    const auto first = generate(jobs.front().prompt, jobs.front().target, m.guidance(), c.guidance, jobs.front().seed);
    plot_inner_probabilities(first.trace, fs::path(out) / "inner_probabilities.png");
    first.trace.write_jsonl(fs::path(out) / "inner_probabilities.trace.jsonl");
    c.save(fs::path(out) / "config.json");
    return 0;
  }
  return 0;
}

void fail_line(const char* kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    fail_line("usage", e.what());
    return 1;
  } catch (const ConfigError& e) {
    fail_line("config", e.what());
    return 1;
  } catch (const OutOfVocabulary& e) {
    fail_line("usage", e.what());
    return 1;
  } catch (const std::exception& e) {
    fail_line("runtime", e.what());
    return 2;
  }
}
