#pragma once

// Run configuration: a small TOML subset ([section] headers, key = value,
// # comments; values are numbers, true/false or "strings").
// Unset fields keep their defaults. canonical() lists every semantic field in
// sorted order and feeds the fingerprint; output location and thread count
// are excluded.

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "fedlora/errors.hpp"
#include "fedlora/federation.hpp"
#include "fedlora/hash.hpp"

namespace fedlora {

struct RunConfig {
  ModelConfig model;
  FederationConfig federation;

  std::string data_path;
  bool synthetic = false;
  std::size_t synth_classes = 7;
  std::size_t synth_per_class = 20;
  SplitFractions fractions;

  bool teacher_enabled = true;
  TeacherConfig teacher = default_teacher();

  std::uint64_t seed = 0;
  std::string output_dir = "run";

  static TeacherConfig default_teacher() {
    TeacherConfig t;
    t.model.embed_dim = 256;
    t.model.depth = 6;
    t.model.heads = 4;
    t.model.ffn_dim = 512;
    return t;
  }

  // Student image geometry and classes carry over to the teacher.
  TeacherConfig resolved_teacher(std::size_t num_classes) const {
    TeacherConfig t = teacher;
    t.model.image_size = model.image_size;
    t.model.channels = model.channels;
    t.model.patch1 = model.patch1;
    t.model.patch2 = model.patch2;
    t.model.window = model.window;
    t.model.num_classes = num_classes;
    t.batch_size = federation.train.batch_size;
    t.augment = federation.train.augment;
    t.seed = splitmix64(seed ^ fnv1a64("teacher"));
    return t;
  }

  bool uses_teacher() const { return teacher_enabled && federation.train.distill.alpha < 1.0; }

  void set(const std::string& key, const std::string& value) {
    auto& f = fields();
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("unknown config field '" + key + "'");
    try {
      it->second.set(*this, value);
    } catch (const ConfigError& e) {
      throw ConfigError("field '" + key + "': " + e.what());
    }
  }

  std::string get(const std::string& key) const {
    auto& f = fields();
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("unknown config field '" + key + "'");
    return it->second.get(*this);
  }

  void validate() const {
    model.validate();
    federation.validate();
    if (synthetic) {
      if (synth_classes != model.num_classes)
        throw ConfigError("field 'data.classes' (" + std::to_string(synth_classes) +
                          ") must equal 'model.num_classes' (" + std::to_string(model.num_classes) + ")");
    } else if (data_path.empty()) {
      throw ConfigError("field 'data.path': no dataset path and synthetic data not requested");
    }
    if (uses_teacher()) resolved_teacher(model.num_classes).model.validate();
  }

  // Every semantic field as sorted key=value lines.
  std::string canonical() const {
    std::string s;
    for (const auto& [k, f] : fields())
      if (f.semantic) s += k + "=" + f.get(*this) + "\n";
    return s;
  }

  Digest fingerprint() const { return sha256(canonical()); }

  // Full config in file form, including non-semantic fields.
  std::string to_toml() const {
    std::string out, section;
    for (const auto& [k, f] : fields()) {
      const auto dot = k.find('.');
      const std::string sec = k.substr(0, dot);
      if (sec != section) {
        out += (out.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
        section = sec;
      }
      std::string v = f.get(*this);
      if (f.quoted) v = "\"" + v + "\"";
      out += k.substr(dot + 1) + " = " + v + "\n";
    }
    return out;
  }

  static RunConfig parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
      auto hash = std::string::npos;
      bool in_str = false;
      for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_str = !in_str;
        if (line[i] == '#' && !in_str) {
          hash = i;
          break;
        }
      }
      std::string l = trim(line.substr(0, hash));
      if (l.empty()) continue;
      if (l.front() == '[') {
        if (l.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
        section = trim(l.substr(1, l.size() - 2));
        continue;
      }
      const auto eq = l.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(l.substr(0, eq)), value = trim(l.substr(eq + 1));
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
      cfg.set(section.empty() ? key : section + "." + key, value);
    }
    return cfg;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

 private:
  struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
    bool semantic = true;
    bool quoted = false;
  };

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  static std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

  static double to_double(const std::string& v) {
    std::size_t pos = 0;
    double d = 0;
    try {
      d = std::stod(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != v.size() || v.empty()) throw ConfigError("expected a number, got '" + v + "'");
    return d;
  }

  static std::uint64_t to_uint(const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("expected a non-negative integer, got '" + v + "'");
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
      throw ConfigError("integer out of range: '" + v + "'");
    }
  }

  static bool to_bool(const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("expected true or false, got '" + v + "'");
  }

  static const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> f = [] {
      std::map<std::string, Field> m;
      auto size = [&](const std::string& k, auto member) {
        m[k] = {[member](RunConfig& c, const std::string& v) { member(c) = static_cast<std::size_t>(to_uint(v)); },
                [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
      };
      auto real = [&](const std::string& k, auto member) {
        m[k] = {[member](RunConfig& c, const std::string& v) { member(c) = to_double(v); },
                [member](const RunConfig& c) { return fmt(member(const_cast<RunConfig&>(c))); }};
      };
      auto flag = [&](const std::string& k, auto member) {
        m[k] = {[member](RunConfig& c, const std::string& v) { member(c) = to_bool(v); },
                [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
      };
#define FL_REF(expr) [](RunConfig& c) -> auto& { return c.expr; }
      size("model.image_size", FL_REF(model.image_size));
      size("model.channels", FL_REF(model.channels));
      size("model.patch1", FL_REF(model.patch1));
      size("model.patch2", FL_REF(model.patch2));
      size("model.embed_dim", FL_REF(model.embed_dim));
      size("model.depth", FL_REF(model.depth));
      size("model.heads", FL_REF(model.heads));
      size("model.window", FL_REF(model.window));
      size("model.ffn_dim", FL_REF(model.ffn_dim));
      size("model.num_classes", FL_REF(model.num_classes));
      size("model.lora_rank", FL_REF(model.lora_rank));
      real("model.lora_alpha", FL_REF(model.lora_alpha));
      real("model.lora_dropout", FL_REF(model.lora_dropout));
      flag("model.adapt_head", FL_REF(model.adapt_head));

      real("distill.temperature", FL_REF(federation.train.distill.temperature));
      real("distill.alpha", FL_REF(federation.train.distill.alpha));

      size("federation.clients", FL_REF(federation.num_clients));
      size("federation.rounds", FL_REF(federation.rounds));
      size("federation.local_epochs", FL_REF(federation.local_epochs));
      size("federation.patience", FL_REF(federation.patience));
      m["federation.target_accuracy"] = {
          [](RunConfig& c, const std::string& v) {
            if (v == "none") c.federation.target_accuracy.reset();
            else c.federation.target_accuracy = to_double(v);
          },
          [](const RunConfig& c) {
            return c.federation.target_accuracy ? fmt(*c.federation.target_accuracy) : std::string("none");
          }};
      size("federation.threads", FL_REF(federation.threads));
      m["federation.threads"].semantic = false;

      real("optim.lr", FL_REF(federation.train.adam.lr));
      real("optim.weight_decay", FL_REF(federation.train.adam.weight_decay));
      real("optim.beta1", FL_REF(federation.train.adam.beta1));
      real("optim.beta2", FL_REF(federation.train.adam.beta2));
      real("optim.eps", FL_REF(federation.train.adam.eps));
      size("optim.batch_size", FL_REF(federation.train.batch_size));

      m["data.path"] = {[](RunConfig& c, const std::string& v) { c.data_path = v; },
                        [](const RunConfig& c) { return c.data_path; }, true, true};
      flag("data.synthetic", FL_REF(synthetic));
      size("data.classes", FL_REF(synth_classes));
      size("data.per_class", FL_REF(synth_per_class));
      real("data.train_fraction", FL_REF(fractions.train));
      real("data.val_fraction", FL_REF(fractions.val));
      real("data.test_fraction", FL_REF(fractions.test));
      flag("data.weighted_sampling", FL_REF(federation.train.weighted_sampling));
      real("data.flip_prob", FL_REF(federation.train.augment.flip_prob));
      real("data.rotation_deg", FL_REF(federation.train.augment.rotation_deg));

      flag("teacher.enabled", FL_REF(teacher_enabled));
      size("teacher.embed_dim", FL_REF(teacher.model.embed_dim));
      size("teacher.depth", FL_REF(teacher.model.depth));
      size("teacher.heads", FL_REF(teacher.model.heads));
      size("teacher.ffn_dim", FL_REF(teacher.model.ffn_dim));
      size("teacher.epochs", FL_REF(teacher.epochs));
      real("teacher.lr", FL_REF(teacher.lr));

      size("run.seed", FL_REF(seed));
      m["run.output"] = {[](RunConfig& c, const std::string& v) { c.output_dir = v; },
                         [](const RunConfig& c) { return c.output_dir; }, false, true};
#undef FL_REF
      return m;
    }();
    return f;
  }
};

}  // namespace fedlora
