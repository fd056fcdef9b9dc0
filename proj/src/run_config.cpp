#include "muse/run_config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace muse {

using nlohmann::json;

json real_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double real_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw ConfigError("expected a number or \"inf\"/\"-inf\", got " + j.dump());
}

namespace {

// Every key of `given` must exist in `known` with a compatible JSON kind;
// objects are checked recursively.
void check_keys(const json& given, const json& known, const std::string& where) {
  if (!given.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : given.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!known.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    const json& ref = known.at(key);
    if (ref.is_object()) {
      check_keys(value, ref, path);
    } else if (ref.is_array() != value.is_array() || ref.is_boolean() != value.is_boolean()) {
      throw ConfigError("config key '" + path + "' has the wrong type");
    }
  }
}

std::string lr_name(LrSchedule s) { return s == LrSchedule::inner ? "inner" : "timestep"; }

LrSchedule lr_from_name(const std::string& s) {
  if (s == "inner") return LrSchedule::inner;
  if (s == "timestep") return LrSchedule::timestep;
  throw ConfigError("lr_schedule must be 'inner' or 'timestep', got '" + s + "'");
}

json optional_to_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

template <typename T>
T get(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

json RunConfig::to_json() const {
  const auto& g = guidance;
  const auto& t = train;
  json eta_grid = json::array();
  for (double e : eval.eta_grid) eta_grid.push_back(real_to_json(e));
  return {
      {"version", version},
      {"seed", seed},
      {"image_size", image_size},
      {"data", data},
      {"out", out},
      {"models",
       {{"denoiser", models.denoiser},
        {"classifier", models.classifier},
        {"agnostic", models.agnostic},
        {"reduced", models.reduced},
        {"embedder", models.embedder},
        {"wheel", models.wheel}}},
      {"guidance",
       {{"eta", real_to_json(g.eta)},
        {"omega", g.omega},
        {"lambda1", g.lambda1},
        {"lambda2", g.lambda2},
        {"loss_stop", g.loss_stop},
        {"max_inner", g.max_inner},
        {"lr0", g.lr0},
        {"tau", g.tau},
        {"rollout_stride", g.rollout_stride},
        {"steps", g.steps},
        {"reoptimize_each_step", g.reoptimize_each_step},
        {"lr_schedule", lr_name(g.lr_schedule)}}},
      {"denoiser",
       {{"channels0", denoiser.channels0},
        {"channels1", denoiser.channels1},
        {"channels2", denoiser.channels2},
        {"token_dim", denoiser.token_dim},
        {"attn_dim", denoiser.attn_dim},
        {"time_dim", denoiser.time_dim},
        {"prompt_len", denoiser.prompt_len},
        {"emotion_tokens", denoiser.emotion_tokens},
        {"train_steps", denoiser.train_steps},
        {"beta_start", denoiser.beta_start},
        {"beta_end", denoiser.beta_end}}},
      {"embedder", {{"embed_dim", embedder.embed_dim}, {"word_dim", embedder.word_dim}, {"temperature", embedder.temperature}}},
      {"train",
       {{"heldout", t.heldout},
        {"classifier_fraction", t.classifier_fraction},
        {"classifier_arch", arch_name(t.classifier_arch)},
        {"denoiser",
         {{"epochs", t.denoiser.epochs},
          {"batch", t.denoiser.batch},
          {"lr", t.denoiser.lr},
          {"dropout", t.denoiser.dropout},
          {"ema_decay", t.denoiser.ema_decay},
          {"heldout_samples", t.denoiser.heldout_samples},
          {"loss_ceiling", optional_to_json(t.denoiser.loss_ceiling)}}},
        {"classifier",
         {{"epochs", t.classifier.epochs},
          {"batch", t.classifier.batch},
          {"lr", t.classifier.lr},
          {"noise_augment", t.classifier.noise_augment},
          {"accuracy_floor", t.classifier.accuracy_floor}}},
        {"embedder",
         {{"epochs", t.embedder.epochs},
          {"batch", t.embedder.batch},
          {"lr", t.embedder.lr},
          {"retrieval_floor", t.embedder.retrieval_floor}}}}},
      {"eval",
       {{"seeds", eval.seeds},
        {"base_seed", eval.base_seed},
        {"prompts", eval.prompts},
        {"eta_percentile", eval.eta_percentile},
        {"eta_grid", eta_grid},
        {"ablation_seeds", eval.ablation_seeds},
        {"edit_images", eval.edit_images},
        {"cg_scale", eval.cg_scale}}},
  };
}

RunConfig RunConfig::from_json(const json& given) {
  const RunConfig defaults;
  json known = defaults.to_json();
  if (!given.is_object()) throw ConfigError("config must be a JSON object");
  if (!given.contains("version")) throw ConfigError("config has no 'version'");
  if (!given.at("version").is_number_integer() || given.at("version").get<int>() != kRunConfigVersion) {
    throw ConfigError("unsupported config version " + given.at("version").dump() + " (expected " +
                      std::to_string(kRunConfigVersion) + ")");
  }
  check_keys(given, known, "");
  json j = known;
  j.merge_patch(given);
  // merge_patch drops keys set to null; the only nullable key is the ceiling.
  const json* ceiling = nullptr;
  if (given.contains("train") && given["train"].contains("denoiser") && given["train"]["denoiser"].contains("loss_ceiling")) {
    ceiling = &given["train"]["denoiser"]["loss_ceiling"];
  }

  RunConfig c;
  c.version = get<int>(j, "version");
  c.seed = get<std::uint64_t>(j, "seed");
  c.image_size = get<int>(j, "image_size");
  c.data = get<std::string>(j, "data");
  c.out = get<std::string>(j, "out");

  const json& m = j.at("models");
  c.models.denoiser = get<std::string>(m, "denoiser");
  c.models.classifier = get<std::string>(m, "classifier");
  c.models.agnostic = get<std::string>(m, "agnostic");
  c.models.reduced = get<std::string>(m, "reduced");
  c.models.embedder = get<std::string>(m, "embedder");
  c.models.wheel = get<std::string>(m, "wheel");

  const json& g = j.at("guidance");
  c.guidance.eta = real_from_json(g.at("eta"));
  c.guidance.omega = get<double>(g, "omega");
  c.guidance.lambda1 = get<double>(g, "lambda1");
  c.guidance.lambda2 = get<double>(g, "lambda2");
  c.guidance.loss_stop = get<double>(g, "loss_stop");
  c.guidance.max_inner = get<int>(g, "max_inner");
  c.guidance.lr0 = get<double>(g, "lr0");
  c.guidance.tau = get<double>(g, "tau");
  c.guidance.rollout_stride = get<int>(g, "rollout_stride");
  c.guidance.steps = get<int>(g, "steps");
  c.guidance.reoptimize_each_step = get<bool>(g, "reoptimize_each_step");
  c.guidance.lr_schedule = lr_from_name(get<std::string>(g, "lr_schedule"));

  const json& d = j.at("denoiser");
  c.denoiser.channels0 = get<int>(d, "channels0");
  c.denoiser.channels1 = get<int>(d, "channels1");
  c.denoiser.channels2 = get<int>(d, "channels2");
  c.denoiser.token_dim = get<int>(d, "token_dim");
  c.denoiser.attn_dim = get<int>(d, "attn_dim");
  c.denoiser.time_dim = get<int>(d, "time_dim");
  c.denoiser.prompt_len = get<int>(d, "prompt_len");
  c.denoiser.emotion_tokens = get<int>(d, "emotion_tokens");
  c.denoiser.train_steps = get<int>(d, "train_steps");
  c.denoiser.beta_start = get<double>(d, "beta_start");
  c.denoiser.beta_end = get<double>(d, "beta_end");

  const json& e = j.at("embedder");
  c.embedder.embed_dim = get<int>(e, "embed_dim");
  c.embedder.word_dim = get<int>(e, "word_dim");
  c.embedder.temperature = get<double>(e, "temperature");

  const json& t = j.at("train");
  c.train.heldout = get<int>(t, "heldout");
  c.train.classifier_fraction = get<double>(t, "classifier_fraction");
  try {
    c.train.classifier_arch = arch_from_name(get<std::string>(t, "classifier_arch"));
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  const json& td = t.at("denoiser");
  c.train.denoiser.epochs = get<int>(td, "epochs");
  c.train.denoiser.batch = get<int>(td, "batch");
  c.train.denoiser.lr = get<double>(td, "lr");
  c.train.denoiser.dropout = get<double>(td, "dropout");
  c.train.denoiser.ema_decay = get<double>(td, "ema_decay");
  c.train.denoiser.heldout_samples = get<int>(td, "heldout_samples");
  if (ceiling && !ceiling->is_null()) c.train.denoiser.loss_ceiling = real_from_json(*ceiling);
  const json& tc = t.at("classifier");
  c.train.classifier.epochs = get<int>(tc, "epochs");
  c.train.classifier.batch = get<int>(tc, "batch");
  c.train.classifier.lr = get<double>(tc, "lr");
  c.train.classifier.noise_augment = get<double>(tc, "noise_augment");
  c.train.classifier.accuracy_floor = get<double>(tc, "accuracy_floor");
  const json& te = t.at("embedder");
  c.train.embedder.epochs = get<int>(te, "epochs");
  c.train.embedder.batch = get<int>(te, "batch");
  c.train.embedder.lr = get<double>(te, "lr");
  c.train.embedder.retrieval_floor = get<double>(te, "retrieval_floor");

  const json& v = j.at("eval");
  c.eval.seeds = get<int>(v, "seeds");
  c.eval.base_seed = get<std::uint64_t>(v, "base_seed");
  c.eval.prompts = get<int>(v, "prompts");
  c.eval.eta_percentile = get<double>(v, "eta_percentile");
  for (const auto& x : v.at("eta_grid")) c.eval.eta_grid.push_back(real_from_json(x));
  c.eval.ablation_seeds = get<int>(v, "ablation_seeds");
  c.eval.edit_images = get<int>(v, "edit_images");
  c.eval.cg_scale = get<double>(v, "cg_scale");

  c.validate();
  return c;
}

void RunConfig::validate() const {
  if (image_size != kImageSize) {
    throw ConfigError("image_size must be " + std::to_string(kImageSize) + " (the glyph renderer's resolution)");
  }
  try {
    guidance.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (train.heldout < 1) throw ConfigError("train.heldout must be positive");
  if (!(train.classifier_fraction > 0 && train.classifier_fraction <= 1)) {
    throw ConfigError("train.classifier_fraction must be in (0, 1]");
  }
  if (eval.seeds < 1 || eval.prompts < 1 || eval.ablation_seeds < 1 || eval.edit_images < 1) {
    throw ConfigError("eval sizes must be positive");
  }
  if (!(eval.eta_percentile >= 0 && eval.eta_percentile <= 100)) throw ConfigError("eval.eta_percentile must be in [0, 100]");
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void RunConfig::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write config " + path.string());
  out << to_json().dump(2) << '\n';
}

std::string RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace muse
