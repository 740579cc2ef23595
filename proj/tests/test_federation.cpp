#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "fedlora/checkpoint.hpp"
#include "fedlora/federation.hpp"
#include "support.hpp"

using namespace fedlora;
using fedlora::testing::randomize_adapters;
using fedlora::testing::random_tensor;
using fedlora::testing::tiny_config;
namespace fs = std::filesystem;

namespace {

LoraStateDict random_dict(unsigned seed, std::size_t adapters = 3) {
  LoraStateDict d;
  d.fingerprint.fill(7);
  for (std::size_t i = 0; i < adapters; ++i)
    d.entries.push_back({"layer" + std::to_string(i),
                         {random_tensor({5, 2}, seed * 31 + 2 * i, -3, 3), random_tensor({2, 4}, seed * 31 + 2 * i + 1, -3, 3)}});
  return d;
}

std::vector<double> flat(const LoraStateDict& d) {
  std::vector<double> v;
  for (const auto& [p, e] : d.entries) {
    v.insert(v.end(), e.A.data().begin(), e.A.data().end());
    v.insert(v.end(), e.B.data().begin(), e.B.data().end());
  }
  return v;
}

LoraStateDict scaled(const LoraStateDict& d, double s) {
  LoraStateDict out = d;
  for (auto& [p, e] : out.entries) {
    e.A = ops::scale(e.A, s);
    e.B = ops::scale(e.B, s);
  }
  return out;
}

std::vector<LabeledExample> balanced(std::size_t classes, std::size_t per_class) {
  std::vector<LabeledExample> out;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t k = 0; k < per_class; ++k)
      out.push_back({Tensor::zeros({1, 1, 1}), c, "c" + std::to_string(c) + "/" + std::to_string(k)});
  return out;
}

// Small end-to-end setup: tiny model, 7-class synthetic data.
struct Fixture {
  std::vector<LabeledExample> examples;
  DatasetManifest manifest;
  MsDeit model;
  TrainConfig train;

  explicit Fixture(std::size_t per_class = 8, std::uint64_t seed = 3) {
    auto [ex, m] = synth_dataset(7, per_class, 32, seed);
    examples = std::move(ex);
    manifest = std::move(m);
    model = MsDeit::create(tiny_config(8, 1), seed);
    train.adam.lr = 5e-3;
    train.augment.image_size = 32;
    train.augment.rotation_deg = 0.0;
    train.augment.normalization = manifest.normalization;
  }

  FederationConfig federation(std::size_t clients, std::size_t rounds) const {
    FederationConfig fc;
    fc.num_clients = clients;
    fc.rounds = rounds;
    fc.train = train;
    fc.seed = 5;
    return fc;
  }

  FederationResult run(std::size_t clients, std::size_t rounds) const {
    auto cs = partition_clients(examples, manifest, model, clients, 5);
    Server server(model, select(examples, manifest, Split::val));
    return run_federation(server, cs, federation(clients, rounds), nullptr);
  }
};

// Client and Server expose no way to read training images.
template <class T>
concept ExposesExamples = requires(const T& t) { t.train(); } || requires(const T& t) { t.examples(); } ||
                          requires(const T& t) { t.data(); } || requires(const T& t) { t.train_; } ||
                          requires(const T& t) { t.val_; };

}  // namespace

TEST(FedAvg, WeightedHandCase) {
  LoraStateDict a, b;
  a.entries.push_back({"x", {Tensor::zeros({1, 1}), Tensor::zeros({1, 1})}});
  b.entries.push_back({"x", {Tensor::full({1, 1}, 4.0), Tensor::full({1, 1}, 4.0)}});
  auto r = fedavg({{&a, 1}, {&b, 3}});
  EXPECT_EQ(r.entries[0].second.A[0], 3.0);
  EXPECT_EQ(r.entries[0].second.B[0], 3.0);
}

TEST(FedAvg, MatchesBruteForceWeightedMean) {
  std::mt19937_64 rng(1);
  for (unsigned trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng() % 6;
    std::vector<LoraStateDict> ds;
    std::vector<std::size_t> ns;
    for (std::size_t c = 0; c < k; ++c) {
      ds.push_back(random_dict(trial * 10 + static_cast<unsigned>(c)));
      ns.push_back(1 + rng() % 50);
    }
    std::vector<std::pair<const LoraStateDict*, std::size_t>> ups;
    for (std::size_t c = 0; c < k; ++c) ups.emplace_back(&ds[c], ns[c]);
    const auto got = flat(fedavg(ups));
    double total = 0;
    for (auto n : ns) total += static_cast<double>(n);
    for (std::size_t i = 0; i < got.size(); ++i) {
      double ref = 0.0;
      for (std::size_t c = 0; c < k; ++c) ref += static_cast<double>(ns[c]) * flat(ds[c])[i];
      EXPECT_NEAR(got[i], ref / total, 1e-12);
    }
  }
}

TEST(FedAvg, LinearInInputs) {
  auto a = random_dict(1), b = random_dict(2);
  const auto base = flat(fedavg({{&a, 2}, {&b, 5}}));
  auto sa = scaled(a, -2.5), sb = scaled(b, -2.5);
  const auto s = flat(fedavg({{&sa, 2}, {&sb, 5}}));
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], -2.5 * base[i], 1e-12);
}

TEST(FedAvg, ClientOrderDoesNotMatter) {
  auto a = random_dict(3), b = random_dict(4), c = random_dict(5);
  auto x = fedavg({{&a, 3}, {&b, 7}, {&c, 11}});
  auto y = fedavg({{&c, 11}, {&a, 3}, {&b, 7}});
  EXPECT_TRUE(x == y);
}

TEST(FedAvg, SingleClientIsIdentity) {
  auto a = random_dict(6);
  EXPECT_TRUE(fedavg({{&a, 17}}) == a);
}

TEST(FedAvg, EqualWeightsGivePlainMean) {
  for (std::size_t k : {2u, 4u}) {
    std::vector<LoraStateDict> ds;
    for (std::size_t c = 0; c < k; ++c) ds.push_back(random_dict(20 + static_cast<unsigned>(c)));
    std::vector<std::pair<const LoraStateDict*, std::size_t>> ups;
    for (auto& d : ds) ups.emplace_back(&d, 9);
    const auto got = flat(fedavg(ups));
    for (std::size_t i = 0; i < got.size(); ++i) {
      std::vector<double> xs;
      for (auto& d : ds) xs.push_back(flat(d)[i]);
      std::sort(xs.begin(), xs.end());
      double s = 0.0;
      for (double x : xs) s += x;
      EXPECT_EQ(got[i], s / static_cast<double>(k));
    }
  }
  auto a = random_dict(30), b = random_dict(31), c = random_dict(32);
  const auto got = flat(fedavg({{&a, 4}, {&b, 4}, {&c, 4}}));
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double mean = (flat(a)[i] + flat(b)[i] + flat(c)[i]) / 3.0;
    EXPECT_NEAR(got[i], mean, 1e-15 * std::max(1.0, std::abs(mean)));
  }
}

TEST(FedAvg, KeyMismatchNamesTheKey) {
  auto a = random_dict(7), b = random_dict(8);
  b.entries[1].first = "rogue";
  try {
    fedavg({{&a, 1}, {&b, 1}});
    FAIL() << "expected ProtocolError";
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("layer1"), std::string::npos) << e.what();
  }
  try {
    fedavg({{&b, 1}, {&a, 1}});
    FAIL() << "expected ProtocolError";
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("'"), std::string::npos) << e.what();
  }
}

TEST(FedAvg, RejectsShapeFingerprintAndEmptyTotals) {
  auto a = random_dict(9), b = random_dict(10);
  b.entries[0].second.A = Tensor::zeros({4, 2});
  EXPECT_THROW(fedavg({{&a, 1}, {&b, 1}}), ProtocolError);
  auto c = random_dict(11);
  c.fingerprint.fill(8);
  EXPECT_THROW(fedavg({{&a, 1}, {&c, 1}}), ProtocolError);
  EXPECT_THROW(fedavg({{&a, 0}}), ProtocolError);
  EXPECT_THROW(fedavg({}), ProtocolError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  MsDeit m = MsDeit::create(tiny_config(), 12);
  randomize_adapters(m, 13);
  const auto d = LoraStateDict::capture(m);
  const fs::path dir = fs::temp_directory_path() / "fedlora_ckpt";
  fs::create_directories(dir);
  d.save(dir / "a.flra");
  auto back = LoraStateDict::load(dir / "a.flra");
  back.save(dir / "b.flra");
  EXPECT_TRUE(back == d);
  std::ifstream fa(dir / "a.flra", std::ios::binary), fb(dir / "b.flra", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(sa, sb);
  fs::remove_all(dir);
}

TEST(Checkpoint, HeaderLayout) {
  auto d = random_dict(14, 2);
  const auto bytes = d.serialize();
  ASSERT_GE(bytes.size(), 42u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FLRA");
  EXPECT_EQ(bytes[4] | bytes[5] << 8, 1);
  EXPECT_TRUE(std::equal(d.fingerprint.begin(), d.fingerprint.end(), bytes.begin() + 6));
  EXPECT_EQ(bytes[38] | bytes[39] << 8 | bytes[40] << 16 | bytes[41] << 24, 2);
  EXPECT_EQ(bytes[42] | bytes[43] << 8, 6);  // "layer0"
  // header + 2 × (path length, path, four dims, 18 doubles)
  EXPECT_EQ(bytes.size(), 42u + 2 * (2 + 6 + 16 + 18 * 8));
}

TEST(Checkpoint, CorruptionIsReported) {
  auto bytes = random_dict(15).serialize();
  auto bad = bytes;
  bad[0] = 'X';
  try {
    LoraStateDict::deserialize(bad);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(std::string(e.what()), "bad magic");
  }
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(LoraStateDict::deserialize(bad), CheckpointError);
  bad.assign(bytes.begin(), bytes.end() - 3);
  EXPECT_THROW(LoraStateDict::deserialize(bad), CheckpointError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(LoraStateDict::deserialize(bad), CheckpointError);
  EXPECT_THROW(LoraStateDict::load("/nonexistent/ckpt.flra"), CheckpointError);
}

TEST(Checkpoint, ApplyRejectsForeignFingerprint) {
  MsDeit a = MsDeit::create(tiny_config(), 16), b = MsDeit::create(tiny_config(), 17);
  EXPECT_THROW(LoraStateDict::capture(a).apply_to(b), ProtocolError);
  randomize_adapters(a, 18);
  auto d = LoraStateDict::capture(a);
  MsDeit c = MsDeit::create(tiny_config(), 16);
  d.apply_to(c);
  EXPECT_TRUE(LoraStateDict::capture(c) == d);
}

TEST(Checkpoint, AdapterSizeSmallUnderDefaultConfig) {
  MsDeit m = MsDeit::create(ModelConfig{}, 0);
  const auto d = LoraStateDict::capture(m);
  const double full = static_cast<double>(m.base_parameter_count() + m.adapter_parameter_count()) * 8.0;
  EXPECT_LT(static_cast<double>(d.serialize().size()) / full, 0.10);
  EXPECT_EQ(d.numel(), m.adapter_parameter_count());
}

TEST(Partition, BalancedSplitIsEvenAndStratified) {
  auto ex = balanced(4, 100);
  auto parts = partition_examples(ex, 4, 4, 1, "train", true);
  std::set<std::string> seen;
  for (const auto& p : parts) {
    EXPECT_EQ(p.size(), 100u);
    std::vector<std::size_t> per(4, 0);
    for (const auto& e : p) {
      ++per[e.class_id];
      EXPECT_TRUE(seen.insert(e.source_id).second) << "duplicate " << e.source_id;
    }
    for (auto n : per) EXPECT_EQ(n, 25u);
  }
  EXPECT_EQ(seen.size(), ex.size());
}

TEST(Partition, UnevenCountsStayNearEven) {
  auto ex = balanced(7, 11);
  auto parts = partition_examples(ex, 7, 4, 2, "train", true);
  std::size_t total = 0, lo = 1000, hi = 0;
  for (const auto& p : parts) {
    total += p.size();
    lo = std::min(lo, p.size());
    hi = std::max(hi, p.size());
  }
  EXPECT_EQ(total, 77u);
  EXPECT_LE(hi - lo, 1u);
}

TEST(Partition, DeterministicPerSeed) {
  auto ex = balanced(3, 20);
  auto ids = [](const std::vector<std::vector<LabeledExample>>& parts) {
    std::vector<std::vector<std::string>> out;
    for (const auto& p : parts) {
      out.emplace_back();
      for (const auto& e : p) out.back().push_back(e.source_id);
    }
    return out;
  };
  EXPECT_EQ(ids(partition_examples(ex, 3, 4, 9, "train", true)), ids(partition_examples(ex, 3, 4, 9, "train", true)));
  EXPECT_NE(ids(partition_examples(ex, 3, 4, 9, "train", true)), ids(partition_examples(ex, 3, 4, 8, "train", true)));
}

TEST(Partition, TooFewExamplesForClients) {
  EXPECT_THROW(partition_examples(balanced(3, 3), 3, 4, 1, "train", true), ConfigError);
  EXPECT_NO_THROW(partition_examples(balanced(3, 3), 3, 4, 1, "val", false));
}

TEST(Partition, ClientsCoverTrainSplit) {
  Fixture f;
  auto clients = partition_clients(f.examples, f.manifest, f.model, 4, 5);
  std::multiset<std::string> ids;
  for (const auto& c : clients)
    for (const auto& id : c.source_ids()) ids.insert(id);
  const auto train = f.manifest.ids(Split::train);
  EXPECT_EQ(ids, std::multiset<std::string>(train.begin(), train.end()));
}

TEST(PrivacyBoundary, NoExampleAccessors) {
  static_assert(!ExposesExamples<Client>);
  static_assert(!ExposesExamples<Server>);
  static_assert(std::is_same_v<decltype(LocalResult::adapters), LoraStateDict>);
  static_assert(std::is_same_v<decltype(LocalResult::history), std::vector<EpochStats>>);
  SUCCEED();
}

TEST(LocalTrain, ZeroEpochsReturnsInput) {
  Fixture f;
  auto clients = partition_clients(f.examples, f.manifest, f.model, 2, 5);
  MsDeit g = f.model.clone_with_private_adapters();
  randomize_adapters(g, 19);
  const auto global = LoraStateDict::capture(g);
  auto out = clients[0].local_train(global, 0, 1, f.train, nullptr, 1);
  EXPECT_TRUE(out.adapters == global);
  EXPECT_TRUE(out.history.empty());
}

TEST(LocalTrain, ChangesOnlyAdaptersAndRejectsForeignState) {
  Fixture f;
  auto clients = partition_clients(f.examples, f.manifest, f.model, 2, 5);
  const Digest before = f.model.base_checksum();
  const auto global = LoraStateDict::capture(f.model);
  auto out = clients[0].local_train(global, 1, 1, f.train, nullptr, 1);
  EXPECT_FALSE(out.adapters == global);
  EXPECT_EQ(f.model.base_checksum(), before);
  for (const auto& [p, a] : f.model.adapters())
    for (double v : a->B.data()) EXPECT_EQ(v, 0.0);
  auto foreign = LoraStateDict::capture(MsDeit::create(tiny_config(8, 1), 99));
  EXPECT_THROW(clients[0].local_train(foreign, 1, 1, f.train, nullptr, 1), ProtocolError);
}

TEST(LocalTrain, TrainLossMostlyDecreases) {
  // one client holding the whole train split, so each epoch averages ~28 batches
  auto [ex, m] = synth_dataset(7, 40, 32, 3);
  MsDeit model = MsDeit::create(tiny_config(16, 1), 3);
  TrainConfig train;
  train.adam.lr = 1e-3;
  train.augment.image_size = 32;
  train.augment.rotation_deg = 0.0;
  train.augment.normalization = m.normalization;
  auto clients = partition_clients(ex, m, model, 1, 5);
  auto out = clients[0].local_train(LoraStateDict::capture(model), 20, 1, train, nullptr, 1);
  ASSERT_EQ(out.history.size(), 20u);
  std::size_t down = 0;
  for (std::size_t e = 1; e < 20; ++e) down += out.history[e].train_loss < out.history[e - 1].train_loss;
  EXPECT_GE(static_cast<double>(down) / 19.0, 0.8) << down << " of 19 transitions decreased";
}

TEST(Federation, SingleClientOneRoundEqualsLocalTraining) {
  Fixture f;
  auto result = f.run(1, 1);
  auto clients = partition_clients(f.examples, f.manifest, f.model, 1, 5);
  auto fc = f.federation(1, 1);
  auto local = clients[0].local_train(LoraStateDict::capture(f.model), fc.local_epochs, 1, fc.train, nullptr, fc.seed);
  EXPECT_TRUE(result.final_adapters == local.adapters);
}

TEST(Federation, DeterministicHistoryAndAccounting) {
  Fixture f;
  auto a = f.run(2, 2), b = f.run(2, 2);
  ASSERT_EQ(a.history.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.history[i].to_json().dump(), b.history[i].to_json().dump());
    EXPECT_EQ(a.history[i].round, i + 1);
    EXPECT_EQ(a.history[i].bytes_exchanged, 2u * 2u * a.final_adapters.serialize().size());
    EXPECT_EQ(a.history[i].clients.size(), 2u);
  }
  EXPECT_TRUE(a.final_adapters == b.final_adapters);
}

TEST(Federation, BaseWeightsUntouchedAndBestRestored) {
  Fixture f;
  auto clients = partition_clients(f.examples, f.manifest, f.model, 2, 5);
  Server server(f.model, select(f.examples, f.manifest, Split::val));
  auto fc = f.federation(2, 3);
  auto res = run_federation(server, clients, fc, nullptr);
  EXPECT_EQ(server.model().base_checksum(), server.initial_checksum());
  EXPECT_TRUE(server.adapters() == res.final_adapters);
  double best = 1e300;
  std::size_t best_round = 0;
  for (const auto& r : res.history)
    if (r.val_loss < best) best = r.val_loss, best_round = r.round;
  EXPECT_EQ(res.best_round, best_round);
}

TEST(Federation, PatienceStopsEarly) {
  Fixture f;
  auto clients = partition_clients(f.examples, f.manifest, f.model, 2, 5);
  Server server(f.model, select(f.examples, f.manifest, Split::val));
  auto fc = f.federation(2, 6);
  fc.patience = 1;
  fc.train.adam.lr = 0.5;  // large steps make the validation loss bounce
  auto res = run_federation(server, clients, fc, nullptr);
  if (res.stopped_early) {
    EXPECT_LT(res.history.size(), 6u);
    EXPECT_EQ(res.history.size(), res.best_round + 1);
  } else {
    for (std::size_t i = 1; i < res.history.size(); ++i)
      EXPECT_LT(res.history[i].val_loss, res.history[i - 1].val_loss);
  }
}

TEST(Federation, ClientFailureAbortsRound) {
  try {
    parallel_for(3, 1, [](std::size_t i) {
      if (i == 1) throw std::runtime_error("boom");
    });
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_EQ(std::string(e.what()), "client 1 failed: boom");
  }
}

TEST(Federation, HistoryIsJsonLines) {
  Fixture f;
  auto res = f.run(2, 1);
  const fs::path p = fs::temp_directory_path() / "fedlora_history.jsonl";
  write_history(p, res.history);
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["round"], n + 1);
    ++n;
  }
  EXPECT_EQ(n, res.history.size());
  fs::remove(p);
}

TEST(Federation, ThreadCapFromEnvironment) {
  ::setenv("FEDSIM_THREADS", "2", 1);
  EXPECT_EQ(resolve_threads(0, 4), 2u);
  ::setenv("FEDSIM_THREADS", "zero", 1);
  EXPECT_THROW(resolve_threads(0, 4), ConfigError);
  ::unsetenv("FEDSIM_THREADS");
  EXPECT_EQ(resolve_threads(0, 4), 4u);
  EXPECT_EQ(resolve_threads(3, 2), 2u);
}
