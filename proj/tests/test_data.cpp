// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "moelab/data.hpp"
#include "moelab/errors.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

// Nearest template under squared distance.
double template_accuracy(const SyntheticConfig& cfg, const Dataset& d) {
  std::vector<Tensor<float>> t;
  for (int c = 0; c < cfg.num_classes; ++c) t.push_back(synthetic_template(cfg, c));
  const std::int64_t per = t[0].size();
  int hit = 0;
  for (int i = 0; i < d.size(); ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < cfg.num_classes; ++c) {
      double s = 0.0;
      for (std::int64_t j = 0; j < per; ++j) {
        const double diff = static_cast<double>(d.images[i * per + j]) - t[static_cast<std::size_t>(c)][j];
        s += diff * diff;
      }
      if (s < best_d) {
        best_d = s;
        best = c;
      }
    }
    hit += best == d.labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hit) / d.size();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "moelab_test_data";
  fs::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void write_bytes(const fs::path& p, const std::string& b) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << b;
}

std::string cifar_fixture() {
  std::string b;
  for (unsigned char label : {3, 7}) {
    b.push_back(static_cast<char>(label));
    for (int plane = 0; plane < 3; ++plane) b.append(1024, static_cast<char>(plane == 0 ? 255 : label * 10 + plane));
  }
  return b;
}

}  // namespace

TEST_CASE("noiseless synthetic images equal their class template") {
  SyntheticConfig c;
  c.noise_sigma = 0.0;
  c.n_per_class = 5;
  const Dataset d = gen_synthetic(c);
  const std::int64_t per = static_cast<std::int64_t>(c.channels) * c.height * c.width;
  for (int i = 0; i < d.size(); ++i) {
    const auto t = synthetic_template(c, d.labels[static_cast<std::size_t>(i)]);
    bool same = true;
    for (std::int64_t j = 0; j < per; ++j) same &= d.images[i * per + j] == t[j];
    CHECK(same);
  }
}

TEST_CASE("synthetic data is deterministic, balanced and in range") {
  SyntheticConfig c;
  c.n_per_class = 30;
  const Dataset a = gen_synthetic(c), b = gen_synthetic(c);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  a.validate();
  std::vector<int> count(3, 0);
  for (int y : a.labels) ++count[static_cast<std::size_t>(y)];
  CHECK(count == std::vector<int>{30, 30, 30});
  for (float v : a.images.data()) CHECK((v >= 0.0f && v <= 1.0f));
  c.split = "test";
  const Dataset t = gen_synthetic(c);
  CHECK(!(t.images == a.images));
  c.split = "train";
  c.seed = 1;
  CHECK(!(gen_synthetic(c).images == a.images));
  c.height = 4;
  CHECK_THROWS_AS(gen_synthetic(c), ContractError);
}

TEST_CASE("class templates are distinct and separable") {
  SyntheticConfig c;
  c.n_per_class = 100;
  c.noise_sigma = 0.0;
  CHECK(template_accuracy(c, gen_synthetic(c)) == 1.0);
  c.noise_sigma = 0.1;
  for (std::uint64_t s = 0; s < 3; ++s) {
    c.seed = s;
    CHECK(template_accuracy(c, gen_synthetic(c)) > 0.95);
  }
}

TEST_CASE("dataset gather and slice") {
  SyntheticConfig c;
  c.n_per_class = 4;
  const Dataset d = gen_synthetic(c);
  const std::vector<int> idx{5, 0};
  const auto x = d.gather_images(idx);
  CHECK(x.shape() == Shape{2, 3, 16, 16});
  CHECK(d.gather_labels(idx) == std::vector<int>{d.labels[5], d.labels[0]});
  const std::int64_t per = 3 * 16 * 16;
  CHECK(x[0] == d.images[5 * per]);
  const Dataset s = d.slice(2, 6);
  CHECK(s.size() == 4);
  CHECK(s.labels[0] == d.labels[2]);
  CHECK(s.images[0] == d.images[2 * per]);
}

TEST_CASE("cifar-10 binary records") {
  const auto path = scratch("two.bin");
  write_bytes(path, cifar_fixture());
  const Dataset d = load_cifar10_binary(path.string());
  CHECK(d.images.shape() == Shape{2, 3, 32, 32});
  CHECK(d.labels == std::vector<int>{3, 7});
  CHECK(d.num_classes == 10);
  CHECK(d.images[0] == 1.0f);
  CHECK(d.images[1024] == static_cast<float>(31.0 / 255.0));
  CHECK(d.images[3072 + 2048] == static_cast<float>(72.0 / 255.0));

  const auto again = scratch("again.bin");
  write_cifar10_binary(again.string(), d);
  CHECK(read_bytes(again) == cifar_fixture());

  const Dataset one = load_cifar10_binary(path.string(), 1);
  CHECK(one.size() == 1);
  CHECK(one.labels == std::vector<int>{3});
}

TEST_CASE("cifar-10 format errors name the byte offset") {
  const auto path = scratch("bad.bin");
  std::string b = cifar_fixture();
  write_bytes(path, b.substr(0, b.size() - 10));
  try {
    load_cifar10_binary(path.string());
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("3073") != std::string::npos);
  }
  b[3073] = 12;
  write_bytes(path, b);
  try {
    load_cifar10_binary(path.string());
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("3073") != std::string::npos);
  }
  CHECK_THROWS_AS(load_cifar10_binary(scratch("missing.bin").string()), FormatError);
  fs::remove_all(path.parent_path());
}
