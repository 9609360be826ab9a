#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "rdbm/bridge.hpp"
#include "rdbm/schedules.hpp"
#include "rdbm/sde_sim.hpp"
#include "rdbm/trainer.hpp"

namespace rdbm {

// Everything a CLI run can be configured with. A config file is either a bare
// schedule object or an object with the sections below; omitted keys keep
// their defaults and unknown keys are errors.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  ScheduleSpec schedule;
  BridgeVariant variant;
  SimConfig sim;
  double verify_x0 = 1.0;
  double verify_mu = 0.0;
  DegradationSpec data;
  std::size_t train_size = 512;
  std::size_t holdout_size = 32;
  ModelConfig model;
  TrainConfig train;
};

namespace config_detail {

template <typename Fn>
void for_each_key(const nlohmann::json& j, const char* section, Fn&& fn) {
  if (!j.is_object()) throw std::invalid_argument(std::string(section) + " config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!fn(key, value)) throw std::invalid_argument(std::string(section) + " config: unknown key '" + key + "'");
  }
}

}  // namespace config_detail

inline void to_json(nlohmann::json& j, const BridgeVariant& v) {
  j = {{"kind", std::string(to_string(v.kind))}, {"small_theta", v.small_theta},
       {"absolute_residual", v.absolute_residual}};
}

inline void from_json(const nlohmann::json& j, BridgeVariant& v) {
  if (j.is_string()) {
    v.kind = parse_variant(j.get<std::string>());
    return;
  }
  config_detail::for_each_key(j, "variant", [&](const std::string& key, const nlohmann::json& value) {
    if (key == "kind") {
      v.kind = parse_variant(value.get<std::string>());
    } else if (key == "small_theta") {
      v.small_theta = value.get<double>();
    } else if (key == "absolute_residual") {
      v.absolute_residual = value.get<bool>();
    } else {
      return false;
    }
    return true;
  });
  if (!(v.small_theta > 0.0)) throw std::invalid_argument("variant: small_theta must be > 0");
}

inline void to_json(nlohmann::json& j, const SimConfig& s) {
  j = {{"trajectories", s.trajectories},
       {"substeps_per_cell", s.substeps_per_cell},
       {"endpoint_clip", s.endpoint_clip},
       {"richardson", s.richardson}};
}

inline void from_json(const nlohmann::json& j, SimConfig& s) {
  config_detail::for_each_key(j, "sim", [&](const std::string& key, const nlohmann::json& value) {
    if (key == "trajectories") {
      s.trajectories = value.get<std::size_t>();
    } else if (key == "substeps_per_cell") {
      s.substeps_per_cell = value.get<std::size_t>();
    } else if (key == "endpoint_clip") {
      s.endpoint_clip = value.get<double>();
    } else if (key == "richardson") {
      s.richardson = value.get<bool>();
    } else {
      return false;
    }
    return true;
  });
  s.validate();
}

inline void to_json(nlohmann::json& j, const DegradationSpec& d) {
  j = {{"kind", std::string(to_string(d.kind))},
       {"streaks", d.streaks},
       {"streak_width", d.streak_width},
       {"streak_strength", d.streak_strength},
       {"darken_factor", d.darken_factor},
       {"blur_radius", d.blur_radius},
       {"image_size", d.image_size}};
}

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = {{"batch_size", t.batch_size},       {"iterations", t.iterations}, {"learning_rate", t.learning_rate},
       {"beta1", t.beta1},                 {"beta2", t.beta2},           {"adam_eps", t.adam_eps},
       {"loss", std::string(to_string(t.loss_mode))}, {"trace_every", t.trace_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  config_detail::for_each_key(j, "train", [&](const std::string& key, const nlohmann::json& value) {
    if (key == "batch_size") {
      t.batch_size = value.get<std::size_t>();
    } else if (key == "iterations") {
      t.iterations = value.get<std::size_t>();
    } else if (key == "learning_rate") {
      t.learning_rate = value.get<double>();
    } else if (key == "beta1") {
      t.beta1 = value.get<double>();
    } else if (key == "beta2") {
      t.beta2 = value.get<double>();
    } else if (key == "adam_eps") {
      t.adam_eps = value.get<double>();
    } else if (key == "loss") {
      t.loss_mode = parse_loss_mode(value.get<std::string>());
    } else if (key == "trace_every") {
      t.trace_every = value.get<std::size_t>();
    } else {
      return false;
    }
    return true;
  });
  t.validate();
}

inline nlohmann::json data_json(const RunConfig& c) {
  nlohmann::json j = c.data;
  j["train_size"] = c.train_size;
  j["holdout_size"] = c.holdout_size;
  return j;
}

inline void read_data_section(const nlohmann::json& j, RunConfig& c) {
  auto& d = c.data;
  config_detail::for_each_key(j, "data", [&](const std::string& key, const nlohmann::json& value) {
    if (key == "kind") {
      d.kind = parse_degradation(value.get<std::string>());
    } else if (key == "streaks") {
      d.streaks = value.get<std::size_t>();
    } else if (key == "streak_width") {
      d.streak_width = value.get<std::size_t>();
    } else if (key == "streak_strength") {
      d.streak_strength = value.get<double>();
    } else if (key == "darken_factor") {
      d.darken_factor = value.get<double>();
    } else if (key == "blur_radius") {
      d.blur_radius = value.get<std::size_t>();
    } else if (key == "image_size") {
      d.image_size = value.get<std::size_t>();
    } else if (key == "train_size") {
      c.train_size = value.get<std::size_t>();
    } else if (key == "holdout_size") {
      c.holdout_size = value.get<std::size_t>();
    } else {
      return false;
    }
    return true;
  });
  d.validate();
  if (c.train_size < 1 || c.holdout_size < 1) throw std::invalid_argument("data: set sizes must be >= 1");
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j{{"schedule", c.schedule}, {"variant", c.variant},           {"sim", c.sim},
                   {"verify", {{"x0", c.verify_x0}, {"mu", c.verify_mu}}},   {"data", data_json(c)},
                   {"model", c.model},       {"train", c.train}};
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  const bool sectioned = !j.contains("family") && !j.contains("theta_min") && !j.contains("N") && !j.contains("T") &&
                         !j.contains("lambda") && !j.contains("theta_max");
  if (!sectioned) {
    c.schedule = j.get<ScheduleSpec>();
    return c;
  }
  config_detail::for_each_key(j, "run", [&](const std::string& key, const nlohmann::json& value) {
    if (key == "seed") {
      c.seed = value.get<std::uint64_t>();
    } else if (key == "schedule") {
      c.schedule = value.get<ScheduleSpec>();
    } else if (key == "variant") {
      c.variant = value.get<BridgeVariant>();
    } else if (key == "sim") {
      c.sim = value.get<SimConfig>();
    } else if (key == "verify") {
      config_detail::for_each_key(value, "verify", [&](const std::string& k, const nlohmann::json& v) {
        if (k == "x0") {
          c.verify_x0 = v.get<double>();
        } else if (k == "mu") {
          c.verify_mu = v.get<double>();
        } else {
          return false;
        }
        return true;
      });
    } else if (key == "data") {
      read_data_section(value, c);
    } else if (key == "model") {
      c.model = value.get<ModelConfig>();
    } else if (key == "train") {
      c.train = value.get<TrainConfig>();
    } else {
      return false;
    }
    return true;
  });
  c.schedule.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config '" + path.string() + "': " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace rdbm
