// fedsim: federated LoRA training simulator.
//
//   fedsim train --config run.toml [--synthetic] [--seed N] [--out DIR] [--set key=value]...
//   fedsim eval --config run.toml --checkpoint ckpt.flra [--split val] [--out report.json]
//   fedsim gradcam --config run.toml --checkpoint ckpt.flra --image img.png --class K --out overlay.png
//   fedsim synth --out DIR [--classes 7] [--per-class 20] [--size 32] [--seed 0]
//   fedsim inspect-checkpoint ckpt.flra
//
// Exit status: 0 ok, 1 runtime failure, 2 usage or configuration, 3 checkpoint.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fedlora/gradcam.hpp"
#include "fedlora/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fedlora;

namespace {

enum Exit { kOk = 0, kRuntime = 1, kUsage = 2, kCheckpoint = 3 };

struct ConfigArgs {
  std::string config;
  bool synthetic = false;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "run configuration file")->check(CLI::ExistingFile);
    cmd->add_flag("--synthetic", synthetic, "use the synthetic planted-square dataset");
    cmd->add_option("--seed", seed, "run seed (overrides run.seed)");
    cmd->add_option("--set", overrides, "override a field, e.g. --set optim.lr=1e-3");
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : RunConfig::load(config);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
      cfg.set(o.substr(0, eq), o.substr(eq + 1));
    }
    if (synthetic) cfg.synthetic = true;
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
  }
};

int cmd_train(const ConfigArgs& ca, const std::string& out_flag) {
  RunConfig cfg = ca.resolve();
  const fs::path out = out_flag.empty() ? fs::path(cfg.output_dir) : fs::path(out_flag);
  run_training(cfg, out, std::cout);
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

int cmd_eval(const ConfigArgs& ca, const std::string& checkpoint, const std::string& split_name,
             const std::string& out) {
  RunConfig cfg = ca.resolve();
  const Split split = parse_split(split_name);
  PreparedData data = prepare_data(cfg);
  MsDeit model = load_student(cfg, checkpoint);
  const auto rep = evaluate_model(model, select(data.examples, data.manifest, split), cfg.federation.train.augment);
  const std::string json = rep.to_json().dump(2) + "\n";
  if (out.empty()) std::cout << json;
  else write_text(out, json);
  std::cerr << split_name << ": accuracy " << rep.accuracy << "  auc " << rep.auc_macro << "  f1 " << rep.f1_macro
            << "  loss " << rep.mean_loss << "\n";
  return kOk;
}

int cmd_gradcam(const ConfigArgs& ca, const std::string& checkpoint, const std::string& image_path, long target,
                std::optional<int> layer, const std::string& out) {
  RunConfig cfg = ca.resolve();
  if (target < 0 || static_cast<std::size_t>(target) >= cfg.model.num_classes)
    throw ConfigError("--class " + std::to_string(target) + " outside [0, " + std::to_string(cfg.model.num_classes) +
                      ")");
  PreparedData data = prepare_data(cfg);
  MsDeit model = load_student(cfg, checkpoint);
  LabeledExample ex{imageops::resize(load_image(image_path), cfg.model.image_size), 0, image_path};
  const Tensor input = preprocess(ex, cfg.federation.train.augment).image;
  const int l = layer.value_or(default_gradcam_layer(model));
  const SaliencyMap map = gradcam_pp(model, input, static_cast<std::size_t>(target), l);
  if (map.zero_gradient) std::cerr << "warning: all-zero gradients at " << map.layer << "; map is empty\n";
  export_overlay(map, ex.image, out);
  std::cout << "wrote " << out << " (" << map.layer << ", class " << target << ")\n";
  return kOk;
}

int cmd_synth(const std::string& out, std::size_t classes, std::size_t per_class, std::size_t size,
              std::uint64_t seed) {
  auto [examples, manifest] = synth_dataset(classes, per_class, size, seed);
  for (const auto& e : examples) {
    const fs::path p = fs::path(out) / manifest.class_names[e.class_id] /
                       (fs::path(e.source_id).filename().string() + ".png");
    fs::create_directories(p.parent_path());
    write_png(p, from_tensor(e.image));
  }
  manifest.save(fs::path(out) / "manifest.json");
  std::cout << "wrote " << examples.size() << " images to " << out << "\n";
  return kOk;
}

int cmd_inspect(const std::string& path) {
  const LoraStateDict d = LoraStateDict::load(path);
  std::cout << "format      FLRA v" << kCheckpointVersion << "\n"
            << "fingerprint " << to_hex(d.fingerprint) << "\n"
            << "adapters    " << d.size() << "\n"
            << "parameters  " << d.numel() << "\n"
            << "bytes       " << d.serialize().size() << "\n";
  for (const auto& [p, e] : d.entries)
    std::cout << "  " << p << "  A " << shape_str(e.A.shape()) << "  B " << shape_str(e.B.shape()) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated LoRA training simulator"};
  app.require_subcommand(1);

  ConfigArgs train_args, eval_args, cam_args;
  std::string train_out, eval_ckpt, eval_split = "val", eval_out, cam_ckpt, cam_image, cam_out, inspect_path;
  std::string synth_out;
  long cam_class = -1;
  std::optional<int> cam_layer;
  std::size_t synth_classes = 7, synth_per_class = 20, synth_size = 32;
  std::uint64_t synth_seed = 0;

  auto* train = app.add_subcommand("train", "run federated training");
  train_args.attach(train);
  train->add_option("--out", train_out, "output directory (default: run.output)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval_args.attach(eval);
  eval->add_option("--checkpoint", eval_ckpt, "adapter checkpoint")->required();
  eval->add_option("--split", eval_split, "train, val or test");
  eval->add_option("--out", eval_out, "report path (default: stdout)");

  auto* cam = app.add_subcommand("gradcam", "write a Grad-CAM++ overlay PNG");
  cam_args.attach(cam);
  cam->add_option("--checkpoint", cam_ckpt, "adapter checkpoint")->required();
  cam->add_option("--image", cam_image, "input image (PNG or JPEG)")->required()->check(CLI::ExistingFile);
  cam->add_option("--class", cam_class, "target class index")->required();
  cam->add_option("--layer", cam_layer, "P1 encoder block index, -1 for the local-window attention output");
  cam->add_option("--out", cam_out, "overlay PNG path")->required();

  auto* synth = app.add_subcommand("synth", "write the synthetic dataset as PNG folders");
  synth->add_option("--out", synth_out, "output root")->required();
  synth->add_option("--classes", synth_classes, "number of classes");
  synth->add_option("--per-class", synth_per_class, "images per class");
  synth->add_option("--size", synth_size, "image side in pixels");
  synth->add_option("--seed", synth_seed, "generator seed");

  auto* inspect = app.add_subcommand("inspect-checkpoint", "print a checkpoint's contents");
  inspect->add_option("checkpoint", inspect_path, "adapter checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(train_args, train_out);
    if (*eval) return cmd_eval(eval_args, eval_ckpt, eval_split, eval_out);
    if (*cam) return cmd_gradcam(cam_args, cam_ckpt, cam_image, cam_class, cam_layer, cam_out);
    if (*synth) return cmd_synth(synth_out, synth_classes, synth_per_class, synth_size, synth_seed);
    if (*inspect) return cmd_inspect(inspect_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
