#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cdbuf/data.hpp"

using namespace cdbuf;

TEST_CASE("gen_dataset structure") {
  ToyDataset ds = gen_dataset(1, 42);
  REQUIRE(ds.images.size() == 1);
  REQUIRE(ds.images[0].boxes.size() == 1);
  const Box& b = ds.images[0].boxes[0];
  CHECK(b.x0 >= 0);
  CHECK(b.y0 >= 0);
  CHECK(b.x1 <= 15);
  CHECK(b.y1 <= 15);

  SECTION("same seed is bit-identical") {
    ToyDataset a = gen_dataset(32, 7);
    ToyDataset c = gen_dataset(32, 7);
    CHECK(dataset_hash(a) == dataset_hash(c));
    CHECK(dataset_hash(a) != dataset_hash(gen_dataset(32, 8)));
  }
  SECTION("round-robin classes are balanced") {
    ToyDataset d = gen_dataset(400, 3);
    std::vector<int> counts(4, 0);
    for (const auto& img : d.images) counts[static_cast<std::size_t>(img.label)]++;
    for (int c : counts) CHECK(c == 100);
  }
  SECTION("pixels stay in [0,1]") {
    ToyDataset d = gen_dataset(64, 5);
    for (const auto& img : d.images)
      for (double v : img.pixels.data()) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
      }
  }
}

TEST_CASE("corrupt contracts") {
  ToyDataset ds = gen_dataset(8, 99);
  const LabeledImage& img = ds.images[0];

  SECTION("severity 0 is bit-exact identity for every kind") {
    for (auto kind : {CorruptionKind::kGaussianNoise, CorruptionKind::kBrightnessShift,
                      CorruptionKind::kBoxBlur, CorruptionKind::kHazeMix}) {
      LabeledImage out = corrupt(img, {kind, 0.0, 123});
      REQUIRE(out.pixels.numel() == img.pixels.numel());
      for (std::size_t i = 0; i < static_cast<std::size_t>(img.pixels.numel()); ++i)
        REQUIRE(out.pixels[i] == img.pixels[i]);
    }
  }
  SECTION("haze at severity 1 on a zero image gives constant 0.56") {
    LabeledImage zero;
    zero.pixels = Tensor::zeros({1, 4, 4});
    zero.boxes.push_back({0, 0, 3, 3});
    LabeledImage out = corrupt(zero, {CorruptionKind::kHazeMix, 1.0, 0});
    for (std::size_t i = 0; i < 16; ++i)
      CHECK_THAT(out.pixels[i], Catch::Matchers::WithinAbs(0.56, 1e-15));
  }
  SECTION("brightness formula") {
    LabeledImage out = corrupt(img, {CorruptionKind::kBrightnessShift, 0.5, 0});
    for (std::size_t i = 0; i < static_cast<std::size_t>(img.pixels.numel()); ++i)
      CHECK_THAT(out.pixels[i],
                 Catch::Matchers::WithinAbs(std::min(1.0, img.pixels[i] + 0.3), 1e-15));
  }
  SECTION("gaussian noise is reproducible and clamped") {
    LabeledImage a = corrupt(img, {CorruptionKind::kGaussianNoise, 0.7, 5});
    LabeledImage b = corrupt(img, {CorruptionKind::kGaussianNoise, 0.7, 5});
    for (std::size_t i = 0; i < static_cast<std::size_t>(a.pixels.numel()); ++i) {
      REQUIRE(a.pixels[i] == b.pixels[i]);
      REQUIRE(a.pixels[i] >= 0.0);
      REQUIRE(a.pixels[i] <= 1.0);
    }
    LabeledImage c = corrupt(img, {CorruptionKind::kGaussianNoise, 0.7, 6});
    bool differs = false;
    for (std::size_t i = 0; i < static_cast<std::size_t>(a.pixels.numel()); ++i)
      differs = differs || a.pixels[i] != c.pixels[i];
    CHECK(differs);
  }
  SECTION("box blur preserves a constant image") {
    LabeledImage flat;
    flat.pixels = Tensor::full({1, 8, 8}, 0.4);
    flat.boxes.push_back({0, 0, 7, 7});
    LabeledImage out = corrupt(flat, {CorruptionKind::kBoxBlur, 0.6, 0});
    for (std::size_t i = 0; i < 64; ++i)
      CHECK_THAT(out.pixels[i], Catch::Matchers::WithinAbs(0.4, 1e-12));
  }
  SECTION("labels and boxes pass through") {
    LabeledImage out = corrupt(img, {CorruptionKind::kHazeMix, 0.9, 0});
    CHECK(out.label == img.label);
    REQUIRE(out.boxes.size() == img.boxes.size());
    CHECK(out.boxes[0].x0 == img.boxes[0].x0);
    CHECK(out.boxes[0].y1 == img.boxes[0].y1);
  }
  SECTION("severity outside [0,1] rejected") {
    CHECK_THROWS_AS(corrupt(img, {CorruptionKind::kHazeMix, 1.5, 0}), ConfigError);
    CHECK_THROWS_AS(corrupt(img, {CorruptionKind::kHazeMix, -0.1, 0}), ConfigError);
  }
}

TEST_CASE("severity_ladder") {
  SECTION("severity 0 cells equal the base") {
    auto cells = severity_ladder({CorruptionKind::kHazeMix}, {0.0}, 16, 11);
    ToyDataset base = gen_dataset(16, 11);
    REQUIRE(cells.size() == 1);
    CHECK(dataset_hash(cells[0].data) == dataset_hash(base));
  }
  SECTION("grid dimensions and shared base") {
    auto cells = severity_ladder({CorruptionKind::kGaussianNoise, CorruptionKind::kHazeMix},
                                 {0.2, 0.5, 0.8}, 8, 21);
    REQUIRE(cells.size() == 6);
    // all cells derive from the same clean base: severity-0 reconstruction
    auto zero = severity_ladder({CorruptionKind::kGaussianNoise, CorruptionKind::kHazeMix},
                                {0.0}, 8, 21);
    CHECK(dataset_hash(zero[0].data) == dataset_hash(zero[1].data));
  }
}

TEST_CASE("dataset dump round-trips") {
  ToyDataset ds = gen_dataset(6, 314);
  const std::string path = "/tmp/cdbuf_test_dataset.bin";
  save_dataset(path, ds);
  ToyDataset back = load_dataset(path);
  REQUIRE(back.images.size() == ds.images.size());
  CHECK(dataset_hash(back) == dataset_hash(ds));
  CHECK(back.classes == ds.classes);
  CHECK(back.seed == ds.seed);
}
