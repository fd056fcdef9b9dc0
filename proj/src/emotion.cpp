#include "muse/emotion.hpp"

#include "muse/types.hpp"

#include "json.hpp"

#include <fstream>

namespace muse {

namespace {

constexpr std::array<std::string_view, 8> kNames = {
    "amusement", "awe", "contentment", "excitement", "anger", "disgust", "fear", "sadness"};

}  // namespace

Emotion emotion_from_id(int id) {
  if (id < 0 || id >= 8) throw std::invalid_argument("emotion id out of range: " + std::to_string(id));
  return static_cast<Emotion>(id);
}

std::string_view emotion_name(Emotion e) { return kNames[static_cast<std::size_t>(emotion_id(e))]; }

std::optional<Emotion> emotion_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return static_cast<Emotion>(i);
  }
  return std::nullopt;
}

Polarity polarity(Emotion e) { return emotion_id(e) < 4 ? Polarity::positive : Polarity::negative; }

EmotionWheel::EmotionWheel()
    : EmotionWheel({Emotion::amusement, Emotion::excitement, Emotion::awe, Emotion::contentment,
                    Emotion::sadness, Emotion::disgust, Emotion::anger, Emotion::fear}) {}

EmotionWheel::EmotionWheel(std::vector<Emotion> order) : order_(std::move(order)) {
  if (order_.size() != 8) throw std::invalid_argument("emotion wheel must list exactly 8 emotions");
  pos_.fill(-1);
  for (std::size_t i = 0; i < order_.size(); ++i) {
    auto& p = pos_[static_cast<std::size_t>(emotion_id(order_[i]))];
    if (p != -1) {
      throw std::invalid_argument("emotion wheel repeats " + std::string(emotion_name(order_[i])));
    }
    p = static_cast<int>(i);
  }
}

int EmotionWheel::position(Emotion e) const { return pos_[static_cast<std::size_t>(emotion_id(e))]; }

std::vector<Emotion> EmotionWheel::similar(Emotion target) const {
  const int p = position(target);
  return {order_[static_cast<std::size_t>((p + 7) % 8)], order_[static_cast<std::size_t>((p + 1) % 8)]};
}

bool EmotionWheel::adjacent(Emotion a, Emotion b) const {
  const int d = (position(a) - position(b) + 8) % 8;
  return d == 1 || d == 7;
}

std::uint64_t EmotionWheel::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (Emotion e : order_) {
    h ^= static_cast<std::uint64_t>(emotion_id(e));
    h *= 1099511628211ULL;
  }
  return h;
}

EmotionWheel EmotionWheel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open wheel config " + path.string());
  nlohmann::json j;
  in >> j;
  if (!j.contains("order") || !j["order"].is_array()) {
    throw std::invalid_argument("wheel config needs an \"order\" array");
  }
  std::vector<Emotion> order;
  for (const auto& item : j["order"]) {
    auto e = emotion_from_name(item.get<std::string>());
    if (!e) throw std::invalid_argument("unknown emotion in wheel config: " + item.get<std::string>());
    order.push_back(*e);
  }
  return EmotionWheel(std::move(order));
}

void EmotionWheel::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["version"] = 1;
  for (Emotion e : order_) j["order"].push_back(std::string(emotion_name(e)));
  std::ofstream out(path);
  out << j.dump(2) << '\n';
}

}  // namespace muse
