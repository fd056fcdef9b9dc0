#include "muse/emotion.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace muse {
namespace {

bool contains(const std::vector<Emotion>& v, Emotion e) { return std::find(v.begin(), v.end(), e) != v.end(); }

TEST(Emotion, NamesAndPolarity) {
  EXPECT_EQ(emotion_name(Emotion::amusement), "amusement");
  EXPECT_EQ(emotion_name(Emotion::sadness), "sadness");
  EXPECT_EQ(polarity(Emotion::amusement), Polarity::positive);
  EXPECT_EQ(polarity(Emotion::fear), Polarity::negative);
  int positive = 0;
  for (Emotion e : kAllEmotions) {
    positive += polarity(e) == Polarity::positive;
    EXPECT_EQ(emotion_from_name(emotion_name(e)), e);
    EXPECT_EQ(emotion_from_id(emotion_id(e)), e);
  }
  EXPECT_EQ(positive, 4);
  EXPECT_FALSE(emotion_from_name("joy").has_value());
  EXPECT_THROW(emotion_from_id(8), std::invalid_argument);
}

TEST(Wheel, DefaultPlacesDisgustNextToSadness) {
  EmotionWheel w;
  EXPECT_TRUE(contains(w.similar(Emotion::sadness), Emotion::disgust));
  EXPECT_TRUE(w.adjacent(Emotion::disgust, Emotion::sadness));
}

TEST(Wheel, NeighbourhoodIsASymmetricCycle) {
  EmotionWheel w;
  for (Emotion a : kAllEmotions) {
    const auto s = w.similar(a);
    EXPECT_EQ(s.size(), 2u);
    EXPECT_FALSE(contains(s, a));
    for (Emotion b : kAllEmotions) EXPECT_EQ(contains(s, b), contains(w.similar(b), a));
  }
  // Walking neighbours visits all eight before returning.
  Emotion prev = w.order()[0], cur = w.order()[1];
  int length = 1;
  while (cur != w.order()[0]) {
    const auto s = w.similar(cur);
    const Emotion next = s[0] == prev ? s[1] : s[0];
    prev = cur;
    cur = next;
    ++length;
  }
  EXPECT_EQ(length, 8);
}

TEST(Wheel, RejectsInvalidOrders) {
  std::vector<Emotion> seven(kAllEmotions.begin(), kAllEmotions.begin() + 7);
  EXPECT_THROW(EmotionWheel{seven}, std::invalid_argument);
  std::vector<Emotion> dup(kAllEmotions.begin(), kAllEmotions.end());
  dup[7] = dup[0];
  EXPECT_THROW(EmotionWheel{dup}, std::invalid_argument);
}

TEST(Wheel, CustomOrderAndFileRoundTrip) {
  std::vector<Emotion> order(kAllEmotions.rbegin(), kAllEmotions.rend());
  EmotionWheel w(order);
  EXPECT_TRUE(w.adjacent(Emotion::sadness, Emotion::amusement));
  const auto path = std::filesystem::temp_directory_path() / "muse_wheel_test.json";
  w.save(path);
  const auto loaded = EmotionWheel::load(path);
  EXPECT_EQ(loaded.order(), w.order());
  EXPECT_EQ(loaded.checksum(), w.checksum());
  EXPECT_NE(loaded.checksum(), EmotionWheel().checksum());

  std::ofstream(path) << R"({"order": ["amusement", "awe", "joy"]})";
  EXPECT_THROW(EmotionWheel::load(path), std::invalid_argument);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace muse
