#pragma once

// Procedural "emotive glyph" data: a shape drawn on a background at a coarse
// grid position. Prompts describe shape, background and position only; the
// emotion is carried by the glyph's palette.

#include "muse/emotion.hpp"
#include "muse/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace muse {

enum class Shape : int { circle, square, triangle, star, cross, ring, diamond, moon };
enum class Background : int { dark, light, striped, dotted };

inline constexpr int kNumShapes = 8;
inline constexpr int kNumBackgrounds = 4;
inline constexpr int kNumPositions = 9;  // 3x3 grid, row-major from top left

std::string_view shape_name(Shape s);
std::string_view background_name(Background b);
// "top left", "top", ..., "center", ..., "bottom right".
std::string_view position_phrase(int cell);

// Fixed shape -> emotion association used to create inherent emotion.
Emotion canonical_emotion(Shape s);
std::uint64_t canonical_table_checksum();

struct GlyphSpec {
  Shape shape = Shape::circle;
  Background background = Background::dark;
  int position = 4;
  Emotion emotion = Emotion::amusement;
  std::uint32_t jitter = 0;

  void validate() const;
  bool operator==(const GlyphSpec&) const = default;
};

// Renders to a 1024 x 3 matrix in [0, 1] (pure function of the spec).
MatF render_glyph(const GlyphSpec& spec);

// Closed-vocabulary tokenizer. Id 0 is padding and id 1 the null condition;
// the eight emotion names sit at the end of the id space and are accepted only
// when `allow_emotion_words` is set (the emotion-only prompt template).
using PromptTokens = std::vector<int>;

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kNull = 1;

  static const Vocabulary& instance();

  int size() const { return static_cast<int>(words_.size()); }
  int id(std::string_view word) const;  // -1 when absent
  const std::string& word(int id) const;
  bool is_emotion_word(int id) const { return id >= first_emotion_id_; }
  int first_emotion_id() const { return first_emotion_id_; }

 private:
  Vocabulary();
  std::vector<std::string> words_;
  int first_emotion_id_ = 0;
};

class OutOfVocabulary : public Error {
 public:
  explicit OutOfVocabulary(std::string word)
      : Error("out-of-vocabulary word: \"" + word + "\""), word_(std::move(word)) {}
  const std::string& word() const { return word_; }

 private:
  std::string word_;
};

PromptTokens tokenize(std::string_view prompt, bool allow_emotion_words = false);
std::string detokenize(const PromptTokens& tokens);

std::string prompt_for(const GlyphSpec& spec);
// "an image of <emotion>"
std::string emotion_only_prompt(Emotion e);

struct GlyphSample {
  GlyphSpec spec;
  std::string prompt;
  PromptTokens tokens;
  MatF image;  // [0, 1]
};

struct GlyphDataset {
  std::vector<GlyphSample> samples;
  // FNV-1a over specs, used to tag checkpoints.
  std::uint64_t hash() const;
};

// Draws n glyphs. With probability rho a glyph takes its shape's canonical
// emotion, otherwise an emotion uniformly at random.
GlyphDataset generate_dataset(int n, double rho, std::uint64_t seed);

// Directory of PNGs plus index.jsonl (the index is the source of truth).
void save_dataset(const GlyphDataset& data, const std::filesystem::path& dir);
GlyphDataset load_dataset(const std::filesystem::path& dir);

// Model-space conversion: pixels in [0, 1] <-> values in [-1, 1].
inline MatF to_model_space(const MatF& pixels) { return pixels.array() * 2.0f - 1.0f; }
inline MatF to_pixel_space(const MatF& z) {
  return ((z.array() + 1.0f) * 0.5f).cwiseMax(0.0f).cwiseMin(1.0f);
}

}  // namespace muse
