#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace muse {

enum class Emotion : int {
  amusement = 0,
  awe = 1,
  contentment = 2,
  excitement = 3,
  anger = 4,
  disgust = 5,
  fear = 6,
  sadness = 7,
};

enum class Polarity { positive, negative };

inline constexpr std::array<Emotion, 8> kAllEmotions = {
    Emotion::amusement, Emotion::awe,     Emotion::contentment, Emotion::excitement,
    Emotion::anger,     Emotion::disgust, Emotion::fear,        Emotion::sadness};

inline int emotion_id(Emotion e) { return static_cast<int>(e); }
Emotion emotion_from_id(int id);
std::string_view emotion_name(Emotion e);
std::optional<Emotion> emotion_from_name(std::string_view name);
Polarity polarity(Emotion e);

// Cyclic arrangement of the eight emotions; neighbours on the cycle are the
// "similar" emotions. The default order is a repo choice that honours the one
// documented adjacency (disgust next to sadness).
class EmotionWheel {
 public:
  EmotionWheel();
  explicit EmotionWheel(std::vector<Emotion> order);

  static EmotionWheel load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const std::vector<Emotion>& order() const { return order_; }
  std::vector<Emotion> similar(Emotion target) const;
  bool adjacent(Emotion a, Emotion b) const;
  // Position of `e` on the cycle, 0..7.
  int position(Emotion e) const;

  // FNV-1a over the order; reported alongside results that depend on it.
  std::uint64_t checksum() const;

 private:
  std::vector<Emotion> order_;
  std::array<int, 8> pos_{};
};

}  // namespace muse
