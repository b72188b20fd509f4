// src/config.cpp

#include "ebt/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

namespace ebt::harness {

namespace {

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  std::string section, key;
  Setter set;
  Getter get;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad(const std::string& what, const std::string& v) {
  throw std::invalid_argument("expected " + what + ", got '" + v + "'");
}

double to_double(const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad("a number", v);
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad("a non-negative integer", v);
  return out;
}

int to_int(const std::string& v) {
  int out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad("an integer", v);
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad("true or false", v);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <class T, class F>
std::vector<T> to_list(const std::string& v, F conv) {
  std::vector<T> out;
  for (const auto& s : split_list(v)) out.push_back(conv(s));
  return out;
}

template <class T>
std::string join(const std::vector<T>& v, std::function<std::string(const T&)> f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

std::string str(double v) { return format_double(v); }
std::string str(bool v) { return v ? "true" : "false"; }
template <class T>
std::string str(T v) requires std::is_integral_v<T> { return std::to_string(v); }

// Field helpers over a member accessor.
template <class T>
Field num(std::string section, std::string key, std::function<T&(ExperimentConfig&)> ref) {
  Setter s = [ref](ExperimentConfig& c, const std::string& v) {
    if constexpr (std::is_same_v<T, double>) {
      ref(c) = to_double(v);
    } else if constexpr (std::is_same_v<T, bool>) {
      ref(c) = to_bool(v);
    } else if constexpr (std::is_same_v<T, int>) {
      ref(c) = to_int(v);
    } else {
      const std::uint64_t x = to_u64(v);
      if (x > std::numeric_limits<T>::max()) bad("a smaller integer", v);
      ref(c) = static_cast<T>(x);
    }
  };
  Getter g = [ref](const ExperimentConfig& c) { return str(ref(const_cast<ExperimentConfig&>(c))); };
  return {std::move(section), std::move(key), std::move(s), std::move(g)};
}

Field text(std::string section, std::string key, std::function<std::string&(ExperimentConfig&)> ref) {
  return {std::move(section), std::move(key), [ref](ExperimentConfig& c, const std::string& v) { ref(c) = v; },
          [ref](const ExperimentConfig& c) { return ref(const_cast<ExperimentConfig&>(c)); }};
}

#define REF(T, expr) std::function<T&(ExperimentConfig&)>([](ExperimentConfig& c) -> T& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(text("experiment", "name", REF(std::string, c.name)));
    f.push_back({"experiment", "seed", [](ExperimentConfig& c, const std::string& v) { c.seed = to_u64(v); },
                 [](const ExperimentConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); }});
    f.push_back({"experiment", "output_dir", [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; },
                 [](const ExperimentConfig& c) { return c.output_dir.string(); }});

    f.push_back({"env", "id", [](ExperimentConfig& c, const std::string& v) { c.env = envs::env_from_string(v); },
                 [](const ExperimentConfig& c) { return envs::to_string(c.env); }});
    f.push_back(num<std::size_t>("env", "demos", REF(std::size_t, c.demos)));
    f.push_back(text("env", "dataset", REF(std::string, c.dataset)));
    f.push_back(num<double>("env", "speed", REF(double, c.env_params.speed)));
    f.push_back(num<double>("env", "action_noise", REF(double, c.env_params.action_noise)));
    f.push_back(num<double>("env", "success_radius", REF(double, c.env_params.success_radius)));
    f.push_back(num<double>("env", "corridor_half_width", REF(double, c.env_params.corridor_half_width)));
    f.push_back(num<double>("env", "start_radius", REF(double, c.env_params.start_radius)));
    f.push_back(num<int>("env", "max_steps", REF(int, c.env_params.max_steps)));
    f.push_back(num<std::size_t>("env", "history", REF(std::size_t, c.env_params.history)));
    f.push_back(num<std::size_t>("env", "horizon", REF(std::size_t, c.env_params.horizon)));
    f.push_back(num<std::size_t>("env", "execute", REF(std::size_t, c.env_params.execute)));

    f.push_back({"model", "backbone",
                 [](ExperimentConfig& c, const std::string& v) { c.model.backbone = model::backbone_from_string(v); },
                 [](const ExperimentConfig& c) { return model::to_string(c.model.backbone); }});
    f.push_back(num<std::size_t>("model", "embed_dim", REF(std::size_t, c.model.embed_dim)));
    f.push_back(num<std::size_t>("model", "encoder_hidden", REF(std::size_t, c.model.encoder_hidden)));
    f.push_back(num<std::size_t>("model", "mlp_width", REF(std::size_t, c.model.mlp_width)));
    f.push_back(num<std::size_t>("model", "mlp_depth", REF(std::size_t, c.model.mlp_depth)));
    f.push_back(num<std::size_t>("model", "tf_width", REF(std::size_t, c.model.tf_width)));
    f.push_back(num<std::size_t>("model", "tf_blocks", REF(std::size_t, c.model.tf_blocks)));
    f.push_back(num<std::size_t>("model", "tf_heads", REF(std::size_t, c.model.tf_heads)));
    f.push_back(num<std::size_t>("model", "context_tokens", REF(std::size_t, c.model.context_tokens)));
    f.push_back(num<double>("model", "head_init_scale", REF(double, c.model.head_init_scale)));

    f.push_back(num<double>("sampler", "eta_base", REF(double, c.sampler.eta_base)));
    f.push_back(num<double>("sampler", "step_scale", REF(double, c.sampler.step_scale)));
    f.push_back(num<double>("sampler", "sigma_min", REF(double, c.sampler.sigma_min)));
    f.push_back(num<double>("sampler", "sigma_max", REF(double, c.sampler.sigma_max)));
    f.push_back(num<int>("sampler", "base_steps", REF(int, c.sampler.base_steps)));
    f.push_back(num<int>("sampler", "extra_steps", REF(int, c.sampler.extra_steps)));
    f.push_back(num<int>("sampler", "max_infer_steps", REF(int, c.sampler.max_infer_steps)));
    f.push_back(num<double>("sampler", "tau", REF(double, c.sampler.tau)));
    f.push_back(num<double>("sampler", "momentum", REF(double, c.sampler.momentum)));
    f.push_back(num<double>("sampler", "energy_clamp", REF(double, c.sampler.energy_clamp)));
    f.push_back(num<bool>("sampler", "langevin_at_inference", REF(bool, c.sampler.langevin_at_inference)));
    f.push_back(num<bool>("sampler", "nesterov_at_inference", REF(bool, c.sampler.nesterov_at_inference)));
    f.push_back(num<bool>("sampler", "presample_normalize", REF(bool, c.sampler.presample_normalize)));
    f.push_back(num<double>("sampler", "rms_eps", REF(double, c.sampler.rms_eps)));

    f.push_back(num<int>("train", "epochs", REF(int, c.train.epochs)));
    f.push_back(num<std::size_t>("train", "batch_size", REF(std::size_t, c.train.batch_size)));
    f.push_back(num<double>("train", "learning_rate", REF(double, c.train.learning_rate)));
    f.push_back(num<double>("train", "adam_beta1", REF(double, c.train.adam.beta1)));
    f.push_back(num<double>("train", "adam_beta2", REF(double, c.train.adam.beta2)));
    f.push_back(num<double>("train", "adam_eps", REF(double, c.train.adam.eps)));
    f.push_back(num<double>("train", "grad_clip_norm", REF(double, c.train.grad_clip_norm)));
    f.push_back({"train", "chain_grad_mode",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.train.chain_grad_mode = train::chain_grad_mode_from_string(v);
                 },
                 [](const ExperimentConfig& c) { return train::to_string(c.train.chain_grad_mode); }});
    f.push_back(num<double>("train", "unstable_fraction", REF(double, c.train.unstable_fraction)));
    f.push_back(num<int>("train", "checkpoint_every", REF(int, c.train.checkpoint_every)));

    f.push_back(num<int>("diffusion", "train_steps", REF(int, c.diffusion.train_steps)));
    f.push_back(num<double>("diffusion", "beta_start", REF(double, c.diffusion.beta_start)));
    f.push_back(num<double>("diffusion", "beta_end", REF(double, c.diffusion.beta_end)));
    f.push_back(num<bool>("diffusion", "time_embedding", REF(bool, c.diffusion.time_embedding)));
    f.push_back(num<bool>("diffusion", "clip_x0", REF(bool, c.diffusion.clip_x0)));

    f.push_back(num<std::size_t>("eval", "episodes", REF(std::size_t, c.eval.episodes)));
    f.push_back({"eval", "steps",
                 [](ExperimentConfig& c, const std::string& v) { c.eval.steps = to_list<int>(v, to_int); },
                 [](const ExperimentConfig& c) {
                   return join<int>(c.eval.steps, [](const int& x) { return std::to_string(x); });
                 }});
    f.push_back(num<bool>("eval", "dynamic", REF(bool, c.eval.dynamic)));
    f.push_back({"eval", "perturb_levels",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.eval.perturb_levels = to_list<double>(v, to_double);
                 },
                 [](const ExperimentConfig& c) {
                   return join<double>(c.eval.perturb_levels, [](const double& x) { return format_double(x); });
                 }});
    f.push_back(num<int>("eval", "perturb_step", REF(int, c.eval.perturb_step)));
    f.push_back(num<std::size_t>("eval", "threads", REF(std::size_t, c.eval.threads)));
    f.push_back(text("eval", "checkpoint", REF(std::string, c.eval.checkpoint)));
    f.push_back(text("eval", "baseline_checkpoint", REF(std::string, c.eval.baseline_checkpoint)));
    f.push_back({"eval", "curve_epochs",
                 [](ExperimentConfig& c, const std::string& v) { c.eval.curve_epochs = to_list<int>(v, to_int); },
                 [](const ExperimentConfig& c) {
                   return join<int>(c.eval.curve_epochs, [](const int& x) { return std::to_string(x); });
                 }});
    return f;
  }();
  return table;
}

#undef REF

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

}  // namespace

ConfigError::ConfigError(const std::string& source, int line, const std::string& message)
    : std::runtime_error(source + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " + message),
      line_(line) {}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::uint64_t ExperimentConfig::require_seed() const {
  if (!seed) throw std::invalid_argument("no seed given: set [experiment] seed or pass --seed");
  return *seed;
}

model::Architecture ExperimentConfig::architecture(model::Head head) const {
  model::Architecture a = envs::Env(env, env_params).architecture(model);
  a.head = head;
  return a;
}

void ExperimentConfig::validate() const {
  require_seed();
  env_params.validate();
  if (demos < 1) throw std::invalid_argument("env.demos must be at least 1");
  architecture(model::Head::energy).validate();
  sampler.validate();
  train.validate();
  diffusion.schedule();
  if (eval.episodes < 1) throw std::invalid_argument("eval.episodes must be at least 1");
  for (int s : eval.steps)
    if (s < 1) throw std::invalid_argument("eval.steps entries must be positive");
  for (double l : eval.perturb_levels)
    if (!(l >= 0.0)) throw std::invalid_argument("eval.perturb_levels entries must be non-negative");
  if (eval.perturb_step < 0) throw std::invalid_argument("eval.perturb_step must be non-negative");
  if (eval.threads < 1) throw std::invalid_argument("eval.threads must be at least 1");
}

void ExperimentConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  const Field* f = find_field(section, key);
  if (!f) throw std::invalid_argument("unknown key '" + section + "." + key + "'");
  f->set(*this, value);
}

std::string ExperimentConfig::to_text() const {
  std::string out, section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      out += (section.empty() ? "" : "\n") + ("[" + f.section + "]\n");
      section = f.section;
    }
    out += f.key + " = " + f.get(*this) + "\n";
  }
  return out;
}

ExperimentConfig parse_config(std::string_view text, const std::string& source) {
  ExperimentConfig cfg;
  std::set<std::pair<std::string, std::string>> seen;
  std::set<std::string> sections;
  for (const auto& f : fields()) sections.insert(f.section);
  std::string section;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(source, line_no, "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!sections.count(section)) throw ConfigError(source, line_no, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source, line_no, "expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (section.empty()) throw ConfigError(source, line_no, "key '" + key + "' outside a section");
    if (!seen.insert({section, key}).second)
      throw ConfigError(source, line_no, "duplicate key '" + section + "." + key + "'");
    try {
      cfg.set(section, key, value);
    } catch (const std::exception& e) {
      throw ConfigError(source, line_no, section + "." + key + ": " + e.what());
    }
    if (end == text.size()) break;
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string(), 0, "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("--set", 0, "expected section.key=value, got '" + assignment + "'");
  const std::string section = trim(std::string_view(assignment).substr(0, dot));
  const std::string key = trim(std::string_view(assignment).substr(dot + 1, eq - dot - 1));
  try {
    cfg.set(section, key, trim(std::string_view(assignment).substr(eq + 1)));
  } catch (const std::exception& e) {
    throw ConfigError("--set", 0, section + "." + key + ": " + e.what());
  }
}

}  // namespace ebt::harness
