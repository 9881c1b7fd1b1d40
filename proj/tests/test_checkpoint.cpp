#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "gbert/adam.hpp"
#include "gbert/checkpoint.hpp"
#include "gbert/param_store.hpp"
#include "gbert/rng.hpp"
#include "gbert/tensor.hpp"

using gbert::Adam;
using gbert::ParamStore;
using gbert::Rng;
using gbert::Tensor;

namespace {

template <typename S>
ParamStore<S> sample_store(Rng& rng) {
  ParamStore<S> store;
  Tensor<S> a = Tensor<S>::zeros({3, 4});
  Tensor<S> b = Tensor<S>::zeros({1, 5});
  for (auto& v : a.values) {
    v = static_cast<S>(rng.normal());
  }
  for (auto& v : b.values) {
    v = static_cast<S>(rng.normal());
  }
  store.add("layer.W", a);
  store.add("layer.b", b);
  return store;
}

std::string tmp(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(5);
  auto store = sample_store<double>(rng);
  Adam<double> opt(Adam<double>::Options{});
  store.zero_grads();
  store.grad("layer.W").fill(0.25);
  store.grad("layer.b").fill(-0.5);
  opt.step(store);
  std::map<std::string, std::string> extras{{"phase", "pretrain"}, {"rng", "12 34"}};
  const auto path = tmp("ck1.bin");
  gbert::save_checkpoint<double>(path, store, &opt, extras);

  Rng rng2(99);
  auto store2 = sample_store<double>(rng2);  // different values, same layout
  Adam<double> opt2(Adam<double>::Options{});
  const auto extras2 = gbert::load_checkpoint<double>(path, store2, &opt2);
  EXPECT_EQ(extras2.at("phase"), "pretrain");
  EXPECT_EQ(extras2.at("rng"), "12 34");
  for (std::size_t p = 0; p < store.size(); ++p) {
    for (std::size_t i = 0; i < store.entry(p).value.numel(); ++i) {
      EXPECT_EQ(store2.entry(p).value.values[i], store.entry(p).value.values[i]);
    }
  }
  EXPECT_EQ(opt2.step_count(), 1u);
  for (std::size_t p = 0; p < store.size(); ++p) {
    EXPECT_EQ(opt2.m()[p], opt.m()[p]);
    EXPECT_EQ(opt2.v()[p], opt.v()[p]);
  }
  // Save the reloaded state again: the two files must be byte-identical.
  const auto path2 = tmp("ck2.bin");
  gbert::save_checkpoint<double>(path2, store2, &opt2, extras2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(s1, s2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST(Checkpoint, Float32RoundTrip) {
  Rng rng(6);
  auto store = sample_store<float>(rng);
  const auto path = tmp("ck3.bin");
  gbert::save_checkpoint<float>(path, store, nullptr, {});
  Rng rng2(7);
  auto store2 = sample_store<float>(rng2);
  gbert::load_checkpoint<float>(path, store2, nullptr);
  for (std::size_t p = 0; p < store.size(); ++p) {
    for (std::size_t i = 0; i < store.entry(p).value.numel(); ++i) {
      EXPECT_EQ(store2.entry(p).value.values[i], store.entry(p).value.values[i]);
    }
  }
  std::remove(path.c_str());
}

TEST(Checkpoint, WidthMismatchRejected) {
  Rng rng(8);
  auto store = sample_store<double>(rng);
  const auto path = tmp("ck4.bin");
  gbert::save_checkpoint<double>(path, store, nullptr, {});
  Rng rng2(9);
  auto fstore = sample_store<float>(rng2);
  EXPECT_THROW(gbert::load_checkpoint<float>(path, fstore, nullptr), gbert::ValidationError);
  std::remove(path.c_str());
}

TEST(Checkpoint, LayoutMismatchesRejected) {
  Rng rng(10);
  auto store = sample_store<double>(rng);
  const auto path = tmp("ck5.bin");
  gbert::save_checkpoint<double>(path, store, nullptr, {});

  ParamStore<double> wrong_count;
  wrong_count.add("layer.W", Tensor<double>::zeros({3, 4}));
  EXPECT_THROW(gbert::load_checkpoint<double>(path, wrong_count, nullptr),
               gbert::ValidationError);

  ParamStore<double> wrong_name;
  wrong_name.add("layer.W", Tensor<double>::zeros({3, 4}));
  wrong_name.add("layer.bias", Tensor<double>::zeros({1, 5}));
  EXPECT_THROW(gbert::load_checkpoint<double>(path, wrong_name, nullptr),
               gbert::ValidationError);

  ParamStore<double> wrong_shape;
  wrong_shape.add("layer.W", Tensor<double>::zeros({4, 3}));
  wrong_shape.add("layer.b", Tensor<double>::zeros({1, 5}));
  EXPECT_THROW(gbert::load_checkpoint<double>(path, wrong_shape, nullptr),
               gbert::ValidationError);
  std::remove(path.c_str());
}

TEST(Checkpoint, GarbageAndTruncationRejected) {
  const auto path = tmp("ck6.bin");
  {
    std::ofstream out(path, std::ios::binary);
    out << "definitely not a checkpoint";
  }
  ParamStore<double> store;
  store.add("x", Tensor<double>::zeros({1, 1}));
  EXPECT_THROW(gbert::load_checkpoint<double>(path, store, nullptr), gbert::ValidationError);

  // Valid header, then cut off mid-stream.
  Rng rng(11);
  auto full = sample_store<double>(rng);
  gbert::save_checkpoint<double>(path, full, nullptr, {});
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }
  {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  Rng rng2(12);
  auto store2 = sample_store<double>(rng2);
  EXPECT_THROW(gbert::load_checkpoint<double>(path, store2, nullptr), gbert::ValidationError);
  std::remove(path.c_str());
}
