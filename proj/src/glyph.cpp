#include "muse/glyph.hpp"

#include "muse/png_io.hpp"

#include "json.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace muse {

namespace {

constexpr std::array<std::string_view, kNumShapes> kShapeNames = {
    "circle", "square", "triangle", "star", "cross", "ring", "diamond", "moon"};
constexpr std::array<std::string_view, kNumBackgrounds> kBackgroundNames = {"dark", "light", "striped",
                                                                             "dotted"};
constexpr std::array<std::string_view, kNumPositions> kPositionPhrases = {
    "top left", "top", "top right", "left", "center", "right", "bottom left", "bottom", "bottom right"};

constexpr std::array<Emotion, kNumShapes> kCanonical = {
    Emotion::contentment,  // circle
    Emotion::sadness,      // square
    Emotion::anger,        // triangle
    Emotion::excitement,   // star
    Emotion::fear,         // cross
    Emotion::amusement,    // ring
    Emotion::awe,          // diamond
    Emotion::disgust,      // moon
};

struct Palette {
  double hue_deg;
  double saturation;
  double value;
};

// Hues step 45 degrees around the default wheel order so wheel neighbours get
// neighbouring hues; negative emotions are darker.
constexpr std::array<Palette, 8> kPalettes = {{
    {0.0, 0.85, 0.95},    // amusement
    {90.0, 0.85, 0.95},   // awe
    {135.0, 0.85, 0.95},  // contentment
    {45.0, 0.85, 0.95},   // excitement
    {270.0, 0.80, 0.72},  // anger
    {225.0, 0.80, 0.72},  // disgust
    {315.0, 0.80, 0.72},  // fear
    {180.0, 0.80, 0.72},  // sadness
}};

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0);
  const double c = v * s;
  const double x = c * (1.0 - std::fabs(std::fmod(h / 60.0, 2.0) - 1.0));
  const double m = v - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h / 60.0)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

bool inside(Shape shape, double dx, double dy, double r) {
  const double d2 = dx * dx + dy * dy;
  switch (shape) {
    case Shape::circle: return d2 <= r * r;
    case Shape::square: return std::fabs(dx) <= 0.8 * r && std::fabs(dy) <= 0.8 * r;
    case Shape::triangle: {
      if (dy < -r || dy > 0.8 * r) return false;
      return std::fabs(dx) <= (dy + r) / 1.8;
    }
    case Shape::star: {
      const double theta = std::atan2(dy, dx) + std::numbers::pi / 2.0;
      return std::sqrt(d2) <= r * (0.62 + 0.38 * std::cos(5.0 * theta));
    }
    case Shape::cross:
      return (std::fabs(dx) <= 0.32 * r && std::fabs(dy) <= r) ||
             (std::fabs(dy) <= 0.32 * r && std::fabs(dx) <= r);
    case Shape::ring: return d2 <= r * r && d2 >= 0.3 * r * r;
    case Shape::diamond: return std::fabs(dx) + std::fabs(dy) <= 1.1 * r;
    case Shape::moon: {
      const double ox = dx - 0.5 * r, oy = dy + 0.25 * r;
      return d2 <= r * r && ox * ox + oy * oy > 0.72 * r * r;
    }
  }
  return false;
}

float background_value(Background bg, int x, int y, float base_shift) {
  switch (bg) {
    case Background::dark: return 0.12f + base_shift;
    case Background::light: return 0.82f + base_shift;
    case Background::striped: return ((y / 3) % 2 == 0 ? 0.22f : 0.5f) + base_shift;
    case Background::dotted: return ((x % 5 == 2 && y % 5 == 2) ? 0.62f : 0.16f) + base_shift;
  }
  return 0.0f;
}

std::uint64_t fnv_mix(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffu;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace

std::string_view shape_name(Shape s) { return kShapeNames[static_cast<std::size_t>(s)]; }
std::string_view background_name(Background b) { return kBackgroundNames[static_cast<std::size_t>(b)]; }
std::string_view position_phrase(int cell) {
  if (cell < 0 || cell >= kNumPositions) throw std::invalid_argument("position cell out of range");
  return kPositionPhrases[static_cast<std::size_t>(cell)];
}

Emotion canonical_emotion(Shape s) { return kCanonical[static_cast<std::size_t>(s)]; }

std::uint64_t canonical_table_checksum() {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < kCanonical.size(); ++i) {
    h = fnv_mix(h, i);
    h = fnv_mix(h, static_cast<std::uint64_t>(emotion_id(kCanonical[i])));
  }
  return h;
}

void GlyphSpec::validate() const {
  const int s = static_cast<int>(shape), b = static_cast<int>(background), e = emotion_id(emotion);
  if (s < 0 || s >= kNumShapes) throw std::invalid_argument("glyph shape out of range");
  if (b < 0 || b >= kNumBackgrounds) throw std::invalid_argument("glyph background out of range");
  if (position < 0 || position >= kNumPositions) throw std::invalid_argument("glyph position out of range");
  if (e < 0 || e >= kNumEmotions) throw std::invalid_argument("glyph emotion out of range");
}

MatF render_glyph(const GlyphSpec& spec) {
  spec.validate();
  std::mt19937 rng(spec.jitter);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double jx = unit(rng), jy = unit(rng), jr = unit(rng), jh = unit(rng), jv = unit(rng),
               jb = unit(rng);

  const int col = spec.position % 3, row = spec.position / 3;
  const double cx = 6.5 + 9.5 * col + 1.2 * jx;
  const double cy = 6.5 + 9.5 * row + 1.2 * jy;
  const double radius = 5.8 + 0.5 * jr;

  const Palette& pal = kPalettes[static_cast<std::size_t>(emotion_id(spec.emotion))];
  const auto fill = hsv_to_rgb(pal.hue_deg + 6.0 * jh, pal.saturation, std::clamp(pal.value + 0.04 * jv, 0.0, 1.0));
  const float shift = static_cast<float>(0.04 * jb);

  MatF img(kImagePixels, 3);
  constexpr std::array<double, 2> kSub = {0.25, 0.75};
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      int hits = 0;
      for (double sy : kSub) {
        for (double sx : kSub) {
          if (inside(spec.shape, x + sx - cx, y + sy - cy, radius)) ++hits;
        }
      }
      const float cov = static_cast<float>(hits) / 4.0f;
      const float bg = background_value(spec.background, x, y, shift);
      for (int c = 0; c < 3; ++c) {
        img(y * kImageSize + x, c) = bg * (1.0f - cov) + fill[static_cast<std::size_t>(c)] * cov;
      }
    }
  }
  return img;
}

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "<null>", "a",     "an",    "image", "of",     "on",   "at",    "background",
            "the",   "with",   "in",    "small", "large", "top",    "bottom", "left", "right",
            "center", "red",   "orange", "yellow", "green", "blue", "purple", "pink", "white",
            "black", "gray"};
  for (auto s : kShapeNames) words_.emplace_back(s);
  for (auto b : kBackgroundNames) words_.emplace_back(b);
  first_emotion_id_ = static_cast<int>(words_.size());
  for (Emotion e : kAllEmotions) words_.emplace_back(emotion_name(e));
}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary vocab;
  return vocab;
}

int Vocabulary::id(std::string_view word) const {
  for (std::size_t i = 2; i < words_.size(); ++i) {
    if (words_[i] == word) return static_cast<int>(i);
  }
  return -1;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw std::invalid_argument("token id out of range: " + std::to_string(id));
  return words_[static_cast<std::size_t>(id)];
}

PromptTokens tokenize(std::string_view prompt, bool allow_emotion_words) {
  const auto& vocab = Vocabulary::instance();
  PromptTokens out;
  for (const auto& w : split_words(prompt)) {
    const int id = vocab.id(w);
    if (id < 0 || (!allow_emotion_words && vocab.is_emotion_word(id))) throw OutOfVocabulary(w);
    out.push_back(id);
  }
  return out;
}

std::string detokenize(const PromptTokens& tokens) {
  const auto& vocab = Vocabulary::instance();
  std::string out;
  for (int id : tokens) {
    if (id == Vocabulary::kPad || id == Vocabulary::kNull) {
      throw std::invalid_argument("detokenize: reserved token id " + std::to_string(id));
    }
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

std::string prompt_for(const GlyphSpec& spec) {
  std::string p = "a ";
  p += shape_name(spec.shape);
  p += " on ";
  p += background_name(spec.background);
  p += " background at ";
  p += position_phrase(spec.position);
  return p;
}

std::string emotion_only_prompt(Emotion e) { return "an image of " + std::string(emotion_name(e)); }

std::uint64_t GlyphDataset::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& s : samples) {
    h = fnv_mix(h, static_cast<std::uint64_t>(s.spec.shape));
    h = fnv_mix(h, static_cast<std::uint64_t>(s.spec.background));
    h = fnv_mix(h, static_cast<std::uint64_t>(s.spec.position));
    h = fnv_mix(h, static_cast<std::uint64_t>(emotion_id(s.spec.emotion)));
    h = fnv_mix(h, s.spec.jitter);
  }
  return h;
}

GlyphDataset generate_dataset(int n, double rho, std::uint64_t seed) {
  if (n < 8) throw std::invalid_argument("dataset needs at least 8 samples");
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick_shape(0, kNumShapes - 1), pick_bg(0, kNumBackgrounds - 1),
      pick_pos(0, kNumPositions - 1), pick_emotion(0, kNumEmotions - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::uint32_t> pick_jitter;

  GlyphDataset data;
  data.samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    GlyphSpec spec;
    spec.shape = static_cast<Shape>(pick_shape(rng));
    spec.background = static_cast<Background>(pick_bg(rng));
    spec.position = pick_pos(rng);
    const double u = coin(rng);
    const int uniform_emotion = pick_emotion(rng);
    spec.emotion = u < rho ? canonical_emotion(spec.shape) : emotion_from_id(uniform_emotion);
    spec.jitter = pick_jitter(rng);
    GlyphSample s;
    s.spec = spec;
    s.prompt = prompt_for(spec);
    s.tokens = tokenize(s.prompt);
    s.image = render_glyph(spec);
    data.samples.push_back(std::move(s));
  }
  return data;
}

void save_dataset(const GlyphDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.jsonl");
  if (!index) throw Error("cannot write " + (dir / "index.jsonl").string());
  char name[32];
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    std::snprintf(name, sizeof(name), "%06zu.png", i);
    write_png(dir / name, s.image, kImageSize, kImageSize);
    nlohmann::ordered_json rec;
    rec["file"] = name;
    rec["prompt"] = s.prompt;
    rec["emotion"] = emotion_id(s.spec.emotion);
    rec["shape"] = shape_name(s.spec.shape);
    rec["background"] = background_name(s.spec.background);
    rec["position"] = s.spec.position;
    rec["jitter"] = s.spec.jitter;
    index << rec.dump() << '\n';
  }
}

GlyphDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.jsonl");
  if (!index) throw Error("missing dataset index " + (dir / "index.jsonl").string());
  GlyphDataset data;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    GlyphSample s;
    const auto shape = rec.at("shape").get<std::string>();
    const auto bg = rec.at("background").get<std::string>();
    int shape_id = -1, bg_id = -1;
    for (int i = 0; i < kNumShapes; ++i)
      if (kShapeNames[static_cast<std::size_t>(i)] == shape) shape_id = i;
    for (int i = 0; i < kNumBackgrounds; ++i)
      if (kBackgroundNames[static_cast<std::size_t>(i)] == bg) bg_id = i;
    if (shape_id < 0 || bg_id < 0) throw Error("bad shape/background in index: " + line);
    s.spec.shape = static_cast<Shape>(shape_id);
    s.spec.background = static_cast<Background>(bg_id);
    s.spec.position = rec.at("position").get<int>();
    s.spec.emotion = emotion_from_id(rec.at("emotion").get<int>());
    s.spec.jitter = rec.at("jitter").get<std::uint32_t>();
    s.spec.validate();
    s.prompt = rec.at("prompt").get<std::string>();
    s.tokens = tokenize(s.prompt);
    int h = 0, w = 0;
    s.image = read_png(dir / rec.at("file").get<std::string>(), &h, &w);
    if (h != kImageSize || w != kImageSize) throw ShapeError("dataset image has wrong size");
    data.samples.push_back(std::move(s));
  }
  return data;
}

}  // namespace muse
