#pragma once

// End-to-end orchestration used by the command-line tool: data preparation,
// teacher construction, federated training and artifact output.

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fedlora/config.hpp"
#include "fedlora/federation.hpp"
#include "fedlora/image_io.hpp"

namespace fedlora {

struct PreparedData {
  std::vector<LabeledExample> examples;
  DatasetManifest manifest;
};

// Loads or generates the dataset, splits it, and fills in the augmentation
// geometry and normalization derived from it.
inline PreparedData prepare_data(RunConfig& cfg) {
  cfg.validate();
  PreparedData d;
  if (cfg.synthetic) {
    auto [ex, m] = synth_dataset(cfg.synth_classes, cfg.synth_per_class, cfg.model.image_size, cfg.seed, cfg.fractions);
    d.examples = std::move(ex);
    d.manifest = std::move(m);
  } else {
    auto [ex, classes] = load_image_folder(cfg.data_path, cfg.model.image_size);
    if (classes.size() != cfg.model.num_classes)
      throw ConfigError("field 'model.num_classes' is " + std::to_string(cfg.model.num_classes) + " but '" +
                        cfg.data_path + "' has " + std::to_string(classes.size()) + " class folders");
    d.manifest = stratified_split(ex, classes, cfg.fractions, cfg.seed);
    d.examples = std::move(ex);
  }
  auto& aug = cfg.federation.train.augment;
  aug.image_size = cfg.model.image_size;
  aug.normalization = d.manifest.normalization;
  return d;
}

inline MsDeit build_student(const RunConfig& cfg) { return MsDeit::create(cfg.model, cfg.seed); }

// Frozen teacher. Synthetic runs pretrain it on a separately seeded public
// synthetic set; folder datasets pretrain it on the pooled train split.
inline std::shared_ptr<const MsDeit> build_teacher(const RunConfig& cfg, const PreparedData& data) {
  const TeacherConfig tc = cfg.resolved_teacher(data.manifest.num_classes());
  if (cfg.synthetic) {
    auto [pub, pm] = synth_dataset(cfg.synth_classes, cfg.synth_per_class, cfg.model.image_size, tc.seed);
    return pretrain_teacher(tc, pub);
  }
  return pretrain_teacher(tc, select(data.examples, data.manifest, Split::train));
}

struct TrainOutcome {
  FederationResult result;
  MetricsReport val_report;
  MetricsReport test_report;
};

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << s;
  if (!out) throw std::runtime_error("short write to '" + p.string() + "'");
}

// Writes checkpoint.flra, history.jsonl, metrics.json (validation split),
// test_metrics.json, roc.csv, manifest.json and config.toml into `out`.
inline TrainOutcome run_training(RunConfig cfg, const std::filesystem::path& out, std::ostream& log) {
  PreparedData data = prepare_data(cfg);
  std::filesystem::create_directories(out);
  std::shared_ptr<const MsDeit> teacher_model;
  std::optional<TeacherHandle> teacher;
  if (cfg.uses_teacher()) {
    log << "pretraining teacher (E=" << cfg.teacher.model.embed_dim << ", depth=" << cfg.teacher.model.depth << ")\n";
    teacher_model = build_teacher(cfg, data);
    teacher = make_teacher(teacher_model, "toy-teacher");
  }
  MsDeit student = build_student(cfg);
  FederationConfig fc = cfg.federation;
  fc.seed = cfg.seed;
  auto clients = partition_clients(data.examples, data.manifest, student, fc.num_clients, cfg.seed);
  Server server(student, select(data.examples, data.manifest, Split::val));
  TrainOutcome o;
  o.result = run_federation(server, clients, fc, teacher ? &*teacher : nullptr, [&](const RoundRecord& r) {
    log << "round " << r.round << "  val_loss " << r.val_loss << "  val_acc " << r.val_accuracy << "\n";
  });
  o.val_report = server.validate(fc.train.augment);
  o.test_report = evaluate_model(server.model(), select(data.examples, data.manifest, Split::test), fc.train.augment);

  o.result.final_adapters.save(out / "checkpoint.flra");
  write_history(out / "history.jsonl", o.result.history);
  write_text(out / "metrics.json", o.val_report.to_json().dump(2) + "\n");
  write_text(out / "test_metrics.json", o.test_report.to_json().dump(2) + "\n");
  write_text(out / "roc.csv", o.val_report.roc_csv());
  data.manifest.save(out / "manifest.json");
  write_text(out / "config.toml", cfg.to_toml());
  log << "best round " << o.result.best_round << "  val_acc " << o.val_report.accuracy << "  test_acc "
      << o.test_report.accuracy << "\n";
  return o;
}

// Student with the checkpoint's adapters loaded. A fingerprint that does not
// match the configured network raises CheckpointError.
inline MsDeit load_student(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
  MsDeit m = build_student(cfg);
  const LoraStateDict d = LoraStateDict::load(checkpoint);
  if (d.fingerprint != adapter_fingerprint(m))
    throw CheckpointError("checkpoint fingerprint " + to_hex(d.fingerprint).substr(0, 16) +
                          " does not match the configured model " + to_hex(adapter_fingerprint(m)).substr(0, 16));
  try {
    d.apply_to(m);
  } catch (const ProtocolError& e) {
    throw CheckpointError(e.what());
  }
  return m;
}

}  // namespace fedlora
