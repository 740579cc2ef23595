#pragma once

// Federated simulation: clients train private LoRA adapters on disjoint data
// partitions; the server averages the adapters weighted by partition size.
// Only LoraStateDicts and scalar statistics leave a Client.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlora/checkpoint.hpp"
#include "fedlora/training.hpp"

namespace fedlora {

struct LocalResult {
  LoraStateDict adapters;
  std::vector<EpochStats> history;
};

class Client {
 public:
  Client(std::size_t id, std::vector<LabeledExample> train, std::vector<LabeledExample> val, const MsDeit& global)
      : id_(id),
        train_(std::move(train)),
        val_(std::move(val)),
        model_(global.clone_with_private_adapters()),
        sampler_(build_sampler(labels_of(train_), global.config.num_classes)) {}

  std::size_t id() const { return id_; }
  std::size_t num_examples() const { return train_.size(); }
  std::size_t num_validation() const { return val_.size(); }
  const std::vector<std::size_t>& class_counts() const { return sampler_.class_counts; }

  std::vector<std::string> source_ids() const {
    std::vector<std::string> ids;
    for (const auto& e : train_) ids.push_back(e.source_id);
    return ids;
  }

  // Loads `global`, runs `epochs` local epochs with a fresh Adam state and
  // returns the updated adapters. Randomness is keyed by (seed, client, round).
  LocalResult local_train(const LoraStateDict& global, std::size_t epochs, std::size_t round, const TrainConfig& cfg,
                          const TeacherHandle* teacher, std::uint64_t seed) {
    global.apply_to(model_);
    const Digest before = model_.base_checksum();
    Adam opt(model_.trainable_tensors(), cfg.adam);
    TrainStreams rs = TrainStreams::derive(seed, "client" + std::to_string(id_) + "/round" + std::to_string(round));
    LocalResult out;
    for (std::size_t e = 0; e < epochs; ++e) {
      EpochStats st = train_epoch(model_, opt, train_, sampler_, cfg, teacher, rs);
      if (!val_.empty()) {
        const auto rep = evaluate_model(model_, val_, cfg.augment);
        st.val_loss = rep.mean_loss;
        st.val_accuracy = rep.accuracy;
      }
      out.history.push_back(st);
    }
    if (model_.base_checksum() != before)
      throw ProtocolError("client " + std::to_string(id_) + " modified frozen base weights");
    out.adapters = LoraStateDict::capture(model_);
    return out;
  }

 private:
  std::size_t id_;
  std::vector<LabeledExample> train_;
  std::vector<LabeledExample> val_;
  MsDeit model_;
  SamplerSpec sampler_;
};

// Stratified round-robin partition of each class's examples (after a seeded
// shuffle) across clients; each client keeps its share in input order.
// Validation examples are split the same way but may leave a client without
// some class.
inline std::vector<std::vector<LabeledExample>> partition_examples(const std::vector<LabeledExample>& examples,
                                                                   std::size_t num_classes, std::size_t num_clients,
                                                                   std::uint64_t seed, const std::string& scope,
                                                                   bool require_every_class) {
  if (num_clients == 0) throw ConfigError("num_clients must be >= 1");
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].class_id >= num_classes)
      throw DataError("example '" + examples[i].source_id + "' has out-of-range class");
    by_class[examples[i].class_id].push_back(i);
  }
  std::vector<std::vector<std::size_t>> assigned(num_clients);
  std::size_t offset = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& items = by_class[c];
    if (require_every_class && items.size() < num_clients)
      throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(items.size()) +
                        " training examples, fewer than " + std::to_string(num_clients) + " clients");
    std::sort(items.begin(), items.end(),
              [&](std::size_t a, std::size_t b) { return examples[a].source_id < examples[b].source_id; });
    Rng rng = stream(seed, "partition/" + scope + "/" + std::to_string(c));
    std::shuffle(items.begin(), items.end(), rng);
    // rotate the starting client so remainders spread across clients
    for (std::size_t i = 0; i < items.size(); ++i) assigned[(offset + i) % num_clients].push_back(items[i]);
    offset += items.size();
  }
  std::vector<std::vector<LabeledExample>> parts(num_clients);
  for (std::size_t k = 0; k < num_clients; ++k) {
    std::sort(assigned[k].begin(), assigned[k].end());
    for (auto i : assigned[k]) parts[k].push_back(examples[i]);
  }
  return parts;
}

struct FederationConfig {
  std::size_t num_clients = 4;
  std::size_t rounds = 30;
  std::size_t local_epochs = 1;
  std::size_t patience = 10;
  // Stop as soon as pooled validation accuracy reaches this value.
  std::optional<double> target_accuracy;
  std::size_t threads = 0;  // 0: one per client, capped by FEDSIM_THREADS
  TrainConfig train;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_clients == 0) throw ConfigError("federation.clients must be >= 1");
    if (rounds == 0) throw ConfigError("federation.rounds must be >= 1");
    if (patience == 0) throw ConfigError("federation.patience must be >= 1");
    train.validate();
  }
};

inline std::vector<Client> partition_clients(const std::vector<LabeledExample>& all, const DatasetManifest& manifest,
                                             const MsDeit& global, std::size_t num_clients, std::uint64_t seed) {
  const auto train = select(all, manifest, Split::train);
  const auto val = select(all, manifest, Split::val);
  auto tp = partition_examples(train, manifest.num_classes(), num_clients, seed, "train", true);
  auto vp = partition_examples(val, manifest.num_classes(), num_clients, seed, "val", false);
  std::vector<Client> clients;
  clients.reserve(num_clients);
  for (std::size_t c = 0; c < num_clients; ++c) clients.emplace_back(c, std::move(tp[c]), std::move(vp[c]), global);
  return clients;
}

// Σ_c (n_c/N)·θ_c elementwise. Per element the weighted terms are summed in
// sorted order, so the result does not depend on client order.
inline LoraStateDict fedavg(const std::vector<std::pair<const LoraStateDict*, std::size_t>>& updates) {
  if (updates.empty()) throw ProtocolError("fedavg: no updates");
  const LoraStateDict& ref = *updates.front().first;
  std::size_t total = 0;
  for (const auto& [d, n] : updates) {
    total += n;
    if (d->fingerprint != ref.fingerprint) throw ProtocolError("fedavg: clients disagree on the adapter fingerprint");
    std::map<std::string, const LoraPair*> keys;
    for (const auto& [p, e] : d->entries) keys[p] = &e;
    for (const auto& [p, e] : ref.entries) {
      auto it = keys.find(p);
      if (it == keys.end()) throw ProtocolError("fedavg: key set mismatch at '" + p + "'");
      if (it->second->A.shape() != e.A.shape() || it->second->B.shape() != e.B.shape())
        throw ProtocolError("fedavg: shape mismatch at '" + p + "'");
    }
    for (const auto& [p, e] : d->entries)
      if (std::none_of(ref.entries.begin(), ref.entries.end(), [&](const auto& r) { return r.first == p; }))
        throw ProtocolError("fedavg: key set mismatch at '" + p + "'");
  }
  if (total == 0) throw ProtocolError("fedavg: total example count is zero");

  std::vector<std::map<std::string, const LoraPair*>> lookup;
  for (const auto& [d, n] : updates) {
    lookup.emplace_back();
    for (const auto& [p, e] : d->entries) lookup.back()[p] = &e;
  }
  std::vector<double> weights;
  for (const auto& u : updates) weights.push_back(static_cast<double>(u.second) / static_cast<double>(total));

  LoraStateDict out;
  out.fingerprint = ref.fingerprint;
  std::vector<double> terms(updates.size());
  auto average = [&](const std::string& path, bool is_a, const Tensor& shape_of) {
    std::vector<const double*> src;
    for (std::size_t c = 0; c < updates.size(); ++c) {
      const LoraPair* e = lookup[c].at(path);
      src.push_back((is_a ? e->A : e->B).data().data());
    }
    std::vector<double> v(shape_of.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (std::size_t c = 0; c < updates.size(); ++c) terms[c] = weights[c] * src[c][i];
      std::sort(terms.begin(), terms.end());
      double s = 0.0;
      for (double t : terms) s += t;
      v[i] = s;
    }
    return Tensor(shape_of.shape(), std::move(v));
  };
  for (const auto& [p, e] : ref.entries) out.entries.push_back({p, {average(p, true, e.A), average(p, false, e.B)}});
  return out;
}

struct ClientRoundStats {
  std::size_t client = 0;
  std::size_t examples = 0;
  std::vector<EpochStats> epochs;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<ClientRoundStats> clients;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double val_auc_macro = 0.0;
  double val_f1_macro = 0.0;
  std::size_t bytes_exchanged = 0;
  std::size_t adapter_bytes = 0;

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    nlohmann::json cs = nlohmann::json::array();
    for (const auto& c : clients) {
      nlohmann::json ep = nlohmann::json::array();
      for (const auto& e : c.epochs)
        ep.push_back({{"train_loss", num(e.train_loss)},
                      {"train_accuracy", num(e.train_accuracy)},
                      {"val_loss", num(e.val_loss)},
                      {"val_accuracy", num(e.val_accuracy)}});
      cs.push_back({{"client", c.client}, {"examples", c.examples}, {"epochs", ep}});
    }
    return {{"round", round},
            {"clients", cs},
            {"val_loss", num(val_loss)},
            {"val_accuracy", num(val_accuracy)},
            {"val_auc_macro", num(val_auc_macro)},
            {"val_f1_macro", num(val_f1_macro)},
            {"bytes_exchanged", bytes_exchanged},
            {"adapter_bytes", adapter_bytes}};
  }
};

inline void write_history(const std::filesystem::path& path, const std::vector<RoundRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write history '" + path.string() + "'");
  for (const auto& r : records) out << r.to_json().dump() << '\n';
}

struct FederationResult {
  LoraStateDict final_adapters;  // best round's adapters
  std::vector<RoundRecord> history;
  std::size_t best_round = 0;
  bool stopped_early = false;
  bool reached_target = false;
};

// Worker count: config value (0 = one per client), capped by FEDSIM_THREADS.
inline std::size_t resolve_threads(std::size_t requested, std::size_t clients) {
  std::size_t n = requested == 0 ? clients : std::min(requested, clients);
  if (const char* env = std::getenv("FEDSIM_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || cap < 1) throw ConfigError("FEDSIM_THREADS must be a positive integer");
    n = std::min(n, static_cast<std::size_t>(cap));
  }
  return std::max<std::size_t>(n, 1);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. If any call throws,
// rethrows the failure of the lowest index after all workers finish.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run(i);
      });
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < n; ++i)
    if (errors[i]) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        throw std::runtime_error("client " + std::to_string(i) + " failed: " + e.what());
      }
    }
}

class Server {
 public:
  Server(MsDeit global, std::vector<LabeledExample> val)
      : global_(global.clone_with_private_adapters()), val_(std::move(val)), checksum_(global_.base_checksum()) {}

  const MsDeit& model() const { return global_; }
  LoraStateDict adapters() const { return LoraStateDict::capture(global_); }
  void load(const LoraStateDict& d) { d.apply_to(global_); }
  const Digest& initial_checksum() const { return checksum_; }
  MetricsReport validate(const AugmentConfig& aug) const { return evaluate_model(global_, val_, aug); }

 private:
  MsDeit global_;
  std::vector<LabeledExample> val_;
  Digest checksum_;
};

// Broadcast, local training, aggregation and pooled validation for up to
// cfg.rounds rounds; early stopping on validation loss with best-adapter restore.
inline FederationResult run_federation(Server& server, std::vector<Client>& clients, const FederationConfig& cfg,
                                       const TeacherHandle* teacher,
                                       const std::function<void(const RoundRecord&)>& on_round = {}) {
  cfg.validate();
  if (clients.empty()) throw ConfigError("run_federation: no clients");
  const std::size_t threads = resolve_threads(cfg.threads, clients.size());
  FederationResult res;
  LoraStateDict global = server.adapters();
  const std::size_t adapter_bytes = global.serialize().size();
  double best_loss = std::numeric_limits<double>::infinity();
  LoraStateDict best = global;
  std::size_t since_best = 0;

  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    std::vector<LocalResult> results(clients.size());
    parallel_for(clients.size(), threads, [&](std::size_t i) {
      results[i] = clients[i].local_train(global, cfg.local_epochs, t, cfg.train, teacher, cfg.seed);
    });
    std::vector<std::pair<const LoraStateDict*, std::size_t>> updates;
    for (std::size_t i = 0; i < clients.size(); ++i) updates.emplace_back(&results[i].adapters, clients[i].num_examples());
    global = fedavg(updates);
    server.load(global);
    if (server.model().base_checksum() != server.initial_checksum())
      throw ProtocolError("global base weights changed during round " + std::to_string(t));

    const auto rep = server.validate(cfg.train.augment);
    RoundRecord rec;
    rec.round = t;
    for (std::size_t i = 0; i < clients.size(); ++i)
      rec.clients.push_back({clients[i].id(), clients[i].num_examples(), results[i].history});
    rec.val_loss = rep.mean_loss;
    rec.val_accuracy = rep.accuracy;
    rec.val_auc_macro = rep.auc_macro;
    rec.val_f1_macro = rep.f1_macro;
    rec.adapter_bytes = adapter_bytes;
    rec.bytes_exchanged = 2 * clients.size() * global.serialize().size();
    res.history.push_back(rec);
    if (on_round) on_round(rec);

    if (rep.mean_loss < best_loss) {
      best_loss = rep.mean_loss;
      best = global;
      res.best_round = t;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      res.stopped_early = true;
      break;
    }
    if (cfg.target_accuracy && rep.accuracy >= *cfg.target_accuracy) {
      res.reached_target = true;
      best = global;
      res.best_round = t;
      break;
    }
  }
  res.final_adapters = best;
  server.load(best);
  return res;
}

}  // namespace fedlora
