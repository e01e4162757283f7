// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <fstream>
#include <set>

#include "helpers.hpp"
#include "msu/data.hpp"

using namespace msu;

namespace {

Sample small_sample(std::int64_t h, std::int64_t w, std::uint64_t seed) {
  Rng rng(seed);
  Sample s;
  s.id = "s" + std::to_string(seed);
  s.image = Image(h, w);
  s.mask = Mask(h, w);
  for (auto& p : s.image.pixels) p = static_cast<std::uint8_t>(rng() % 256);
  for (auto& m : s.mask.labels) m = static_cast<std::uint8_t>(rng() % 7);
  return s;
}

}  // namespace

TEST_SUITE("png io") {
  TEST_CASE("image and mask round trip") {
    test::TempDir dir("png");
    Sample s = small_sample(9, 13, 1);
    write_image_png(dir.path() / "i.png", s.image);
    write_mask_png(dir.path() / "m.png", s.mask);
    CHECK(read_image_png(dir.path() / "i.png") == s.image);
    CHECK(read_mask_png(dir.path() / "m.png") == s.mask);
  }

  TEST_CASE("unreadable file names the path") {
    test::TempDir dir("png_bad");
    std::ofstream(dir.path() / "junk.png") << "not a png";
    try {
      read_image_png(dir.path() / "junk.png");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("junk.png") != std::string::npos);
    }
  }
}

TEST_SUITE("dataset loading") {
  TEST_CASE("sorted pairs") {
    test::TempDir dir("load");
    for (auto id : {"c", "a", "b"}) {
      Sample s = small_sample(8, 8, static_cast<std::uint64_t>(id[0]));
      s.id = id;
      write_sample(dir.path(), s);
    }
    auto v = load_dataset(dir.path());
    REQUIRE(v.size() == 3);
    CHECK(v[0].id == "a");
    CHECK(v[2].id == "c");
  }

  TEST_CASE("bad mask value is rejected naming file and value") {
    test::TempDir dir("load_bad");
    Sample s = small_sample(4, 4, 2);
    s.id = "bad";
    s.mask.labels[5] = 9;
    write_sample(dir.path(), s);
    try {
      load_dataset(dir.path());
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string what = e.what();
      CHECK(what.find("bad") != std::string::npos);
      CHECK(what.find('9') != std::string::npos);
    }
  }

  TEST_CASE("size mismatch is rejected") {
    test::TempDir dir("load_size");
    std::filesystem::create_directories(dir.path() / "images");
    std::filesystem::create_directories(dir.path() / "masks");
    write_image_png(dir.path() / "images" / "x.png", Image(16, 16));
    write_mask_png(dir.path() / "masks" / "x.png", Mask(16, 15));
    CHECK_THROWS_AS(load_dataset(dir.path()), DataError);
  }
}

TEST_SUITE("augmentation") {
  TEST_CASE("double flip restores the sample") {
    Sample s = small_sample(12, 10, 3);
    AugmentConfig cfg;
    AugmentParams p;
    p.flip = true;
    Sample once = augment_with(s, p, cfg);
    CHECK_FALSE(once.mask == s.mask);
    Sample twice = augment_with(once, p, cfg);
    CHECK(twice.mask == s.mask);
    CHECK(twice.image == s.image);
  }

  TEST_CASE("half scale pads the border") {
    Image img(16, 16, 200);
    Mask m(16, 16, 3);
    AugmentParams p;
    p.scale = 0.5;
    Image gi = apply_geometry(img, p, 128);
    Mask gm = apply_geometry(m, p);
    for (std::int64_t x = 0; x < 16; ++x) {
      CHECK(gm.at(0, x) == 0);
      CHECK(gm.at(15, x) == 0);
      CHECK(gi.at(0, x, 0) == 128);
    }
    CHECK(gm.at(8, 8) == 3);
    int inside = 0;
    for (auto v : gm.labels) inside += v == 3;
    CHECK(inside == 64);
  }

  TEST_CASE("flip frequency") {
    AugmentConfig cfg;
    Rng rng(4);
    int flips = 0;
    for (int i = 0; i < 10000; ++i) flips += sample_augment(cfg, rng).flip;
    CHECK(flips >= 4800);
    CHECK(flips <= 5200);
  }

  TEST_CASE("geometry keeps image and mask aligned") {
    // An image whose pixels encode their own label: any misalignment shows up as a mismatch.
    Rng rng(5);
    Sample s = small_sample(20, 20, 6);
    for (std::int64_t y = 0; y < 20; ++y)
      for (std::int64_t x = 0; x < 20; ++x)
        for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = static_cast<std::uint8_t>(s.mask.at(y, x) * 30);
    AugmentConfig cfg;
    for (int i = 0; i < 200; ++i) {
      AugmentParams p = sample_augment(cfg, rng);
      p.scale = 1.0;
      Image gi = apply_geometry(s.image, p, 0);
      Mask gm = apply_geometry(s.mask, p);
      for (std::int64_t y = 0; y < 20; ++y)
        for (std::int64_t x = 0; x < 20; ++x) REQUIRE(gi.at(y, x, 0) == gm.at(y, x) * 30);
    }
  }

  TEST_CASE("disabled augmentation is the identity") {
    AugmentConfig cfg;
    cfg.enabled = false;
    Rng rng(7);
    Sample s = small_sample(8, 8, 8);
    Sample a = augment(s, cfg, rng);
    CHECK(a.image == s.image);
    CHECK(a.mask == s.mask);
  }

  TEST_CASE("uniform01 is in range and uses 53 bits") {
    Rng rng(9);
    for (int i = 0; i < 1000; ++i) {
      const double u = uniform01(rng);
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
    }
    Rng a(10), b(10);
    CHECK(uniform01(a) == static_cast<double>(b() >> 11) * 0x1.0p-53);
  }
}

TEST_SUITE("phantoms") {
  TEST_CASE("same seed is bit identical") {
    PhantomSpec spec;
    Sample a = generate_phantom(77, spec), b = generate_phantom(77, spec);
    CHECK(a.image == b.image);
    CHECK(a.mask == b.mask);
    CHECK_FALSE(generate_phantom(78, spec).mask == a.mask);
  }

  TEST_CASE("abdominal wall is always present and masks validate") {
    PhantomSpec spec;
    for (std::uint64_t s = 0; s < 30; ++s) {
      Sample p = generate_phantom(derive_seed(3, s), spec);
      validate_mask(p.mask, 7, p.id);
      CHECK(std::count(p.mask.labels.begin(), p.mask.labels.end(), kAbdominalWall) > 0);
    }
  }

  TEST_CASE("intensity bands follow the class") {
    PhantomSpec spec;
    spec.speckle_variance = 0;
    spec.blur_sigma = 0;
    Sample p = generate_phantom(5, spec);
    for (std::int64_t y = 0; y < p.mask.height; ++y)
      for (std::int64_t x = 0; x < p.mask.width; ++x) {
        const auto k = p.mask.at(y, x);
        if (k == kBackground) continue;
        const int v = p.image.at(y, x, 0);
        REQUIRE(v >= spec.intensity[k][0]);
        REQUIRE(v <= spec.intensity[k][1]);
      }
  }

  TEST_CASE("spec validation") {
    PhantomSpec spec;
    spec.presence[3] = 0.5;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = PhantomSpec{};
    spec.height = 0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
  }

  TEST_CASE("spec json round trip keeps the hash") {
    PhantomSpec spec;
    spec.height = 96;
    CHECK(PhantomSpec::from_json(spec.to_json()).hash() == spec.hash());
    CHECK(spec.hash() != PhantomSpec{}.hash());
  }
}

TEST_SUITE("splits") {
  std::vector<Sample> ids(int n) {
    std::vector<Sample> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)].id = std::to_string(i);
    return v;
  }

  TEST_CASE("floor then remainder") {
    CHECK(split_sizes(10, {0.7, 0.2, 0.1}) == std::array<std::int64_t, 3>{7, 2, 1});
    CHECK(split_sizes(8, {1.0, 0.0, 0.0}) == std::array<std::int64_t, 3>{8, 0, 0});
    CHECK(split_sizes(4, {0.7, 0.2, 0.1}) == std::array<std::int64_t, 3>{2, 1, 1});
  }

  TEST_CASE("deterministic partition of the input") {
    auto a = split_dataset(ids(23), {0.7, 0.2, 0.1}, 5);
    auto b = split_dataset(ids(23), {0.7, 0.2, 0.1}, 5);
    std::multiset<std::string> all;
    for (auto* part : {&a.train, &a.val, &a.test})
      for (auto& s : *part) all.insert(s.id);
    CHECK(all.size() == 23);
    CHECK(std::set<std::string>(all.begin(), all.end()).size() == 23);
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].id == b.train[i].id);
  }
}

TEST_CASE("batch tensors are scaled to [-1, 1]") {
  Sample s;
  s.image = Image(2, 2, 0);
  s.image.at(0, 1, 0) = 255;
  s.mask = Mask(2, 2, 4);
  auto [x, y] = make_batch({&s}, DType::f64);
  CHECK(x.shape() == Shape{1, 3, 2, 2});
  CHECK(x.at(0) == -1.0);
  CHECK(x.at(1) == 1.0);
  CHECK(y.values == std::vector<std::int32_t>{4, 4, 4, 4});
}
