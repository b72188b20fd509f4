// src/energy_model.cpp

#include "ebt/energy_model.hpp"

#include "ebt/binio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>

namespace ebt::model {

std::string to_string(Backbone b) { return b == Backbone::mlp ? "mlp" : "transformer"; }

Backbone backbone_from_string(const std::string& s) {
  if (s == "mlp") return Backbone::mlp;
  if (s == "transformer") return Backbone::transformer;
  throw std::invalid_argument("unknown backbone '" + s + "' (expected mlp or transformer)");
}

void Architecture::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw std::invalid_argument(std::string("architecture: ") + what + " must be >= 1");
  };
  positive(obs_dim, "obs_dim");
  positive(history, "history");
  positive(horizon, "horizon");
  positive(action_dim, "action_dim");
  positive(embed_dim, "embed_dim");
  positive(encoder_hidden, "encoder_hidden");
  if (backbone == Backbone::mlp) {
    positive(mlp_width, "mlp_width");
    positive(mlp_depth, "mlp_depth");
  } else {
    positive(tf_width, "tf_width");
    positive(tf_blocks, "tf_blocks");
    positive(tf_heads, "tf_heads");
    positive(context_tokens, "context_tokens");
    if (tf_width % tf_heads != 0)
      throw std::invalid_argument("architecture: tf_width must be divisible by tf_heads");
  }
  if (!(head_init_scale > 0.0) || !std::isfinite(head_init_scale))
    throw std::invalid_argument("architecture: head_init_scale must be positive");
}

LayerError::LayerError(std::size_t layer, const std::string& name, const std::string& cause)
    : std::runtime_error("non-finite activation in layer " + std::to_string(layer) + " (" + name +
                         "): " + cause),
      layer_(layer) {}

EnergyAndGrad energy_grad(const EnergyFunction& f, const Tensor& z, const Tensor& y,
                          bool create_graph) {
  Tensor probe = y;
  if (!y.requires_grad()) {
    probe = y.detach();
    probe.set_requires_grad(true);
  }
  ad::EnableGradGuard on(true);
  Tensor e = f.energy(z, probe);
  Tensor g = ad::grad(ad::sum(e), {probe}, {.create_graph = create_graph})[0];
  if (!create_graph) e = e.detach();
  return {e, g};
}

// ---------------------------------------------------------------------------

QuadraticEnergy::QuadraticEnergy(std::vector<double> mu, std::size_t window_size)
    : window_size_(window_size) {
  const std::size_t n = mu.size();
  mu_ = Tensor::from({n}, std::move(mu));
}

Tensor QuadraticEnergy::encode(const Tensor& windows) const {
  if (windows.rank() != 2 || windows.dim(1) != window_size_)
    throw ad::ShapeError("QuadraticEnergy::encode: expected [B," + std::to_string(window_size_) +
                         "], got " + ad::shape_str(windows.shape()));
  return Tensor::zeros({windows.dim(0), 1});
}

Tensor QuadraticEnergy::energy(const Tensor&, const Tensor& y) const {
  if (y.rank() != 2 || y.dim(1) != mu_.numel())
    throw ad::ShapeError("QuadraticEnergy::energy: expected [B," + std::to_string(mu_.numel()) +
                         "], got " + ad::shape_str(y.shape()));
  Tensor e = ad::scale(ad::sum_last(ad::square(ad::sub(y, mu_))), 0.5);
  return ad::reshape(e, {y.dim(0)});
}

// ---------------------------------------------------------------------------

namespace {

template <class F>
Tensor layer(std::size_t index, const std::string& name, F&& f) {
  try {
    return f();
  } catch (const ad::NonFiniteError& e) {
    throw LayerError(index, name, e.what());
  }
}

}  // namespace

void EnergyModel::register_shapes() {
  layout_.clear();
  init_std_.clear();
  const auto& a = arch_;
  auto weight = [&](const std::string& name, std::size_t in, std::size_t out, double gain = 1.0) {
    layout_.push_back({name, {in, out}});
    init_std_.push_back(gain / std::sqrt(static_cast<double>(in)));
  };
  auto bias = [&](const std::string& name, std::size_t n) {
    layout_.push_back({name, {n}});
    init_std_.push_back(0.0);
  };
  auto dense = [&](const std::string& prefix, std::size_t in, std::size_t out, double gain = 1.0) {
    weight(prefix + ".w", in, out, gain);
    bias(prefix + ".b", out);
  };

  dense("enc.l1", a.window_size(), a.encoder_hidden);
  dense("enc.l2", a.encoder_hidden, a.embed_dim);

  const double head_gain = a.head == Head::energy ? a.head_init_scale : 1.0;
  if (a.backbone == Backbone::mlp) {
    std::size_t in = a.embed_dim + a.action_size();
    for (std::size_t i = 0; i < a.mlp_depth; ++i) {
      dense("mlp.l" + std::to_string(i), in, a.mlp_width);
      in = a.mlp_width;
    }
    dense("head", in, a.output_size(), head_gain);
  } else {
    const std::size_t w = a.tf_width;
    dense("tf.in", a.action_dim, w);
    layout_.push_back({"tf.pos", {a.horizon, w}});
    init_std_.push_back(1.0 / std::sqrt(static_cast<double>(w)));
    dense("tf.ctx", a.embed_dim, a.context_tokens * w);
    for (std::size_t b = 0; b < a.tf_blocks; ++b) {
      const std::string p = "tf.b" + std::to_string(b);
      for (const char* kind : {".self", ".cross"})
        for (const char* proj : {".q", ".k", ".v", ".o"}) dense(p + kind + proj, w, w);
      dense(p + ".ff1", w, 4 * w);
      dense(p + ".ff2", 4 * w, w);
    }
    dense("head", w, a.head == Head::energy ? 1 : a.action_dim, head_gain);
  }
}

EnergyModel::EnergyModel(const Architecture& arch, Rng& rng) : arch_(arch) {
  arch_.validate();
  register_shapes();
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const auto& [name, shape] = layout_[i];
    std::vector<double> v(ad::numel_of(shape), 0.0);
    if (init_std_[i] > 0.0)
      for (auto& x : v) x = rng.normal(0.0, init_std_[i]);
    params_.push_back({name, Tensor::from(shape, std::move(v), true)});
  }
}

EnergyModel::EnergyModel(const Architecture& arch, const std::vector<NamedTensor>& params)
    : arch_(arch) {
  arch_.validate();
  register_shapes();
  if (params.size() != layout_.size())
    throw std::invalid_argument("EnergyModel: expected " + std::to_string(layout_.size()) +
                                " parameter tensors, got " + std::to_string(params.size()));
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (params[i].name != layout_[i].first || params[i].value.shape() != layout_[i].second)
      throw std::invalid_argument("EnergyModel: parameter " + std::to_string(i) + " is '" +
                                  params[i].name + "' " + ad::shape_str(params[i].value.shape()) +
                                  ", expected '" + layout_[i].first + "' " +
                                  ad::shape_str(layout_[i].second));
    Tensor t = params[i].value.detach();
    t.set_requires_grad(true);
    params_.push_back({params[i].name, t});
  }
}

EnergyModel::EnergyModel(const EnergyModel& other)
    : arch_(other.arch_), layout_(other.layout_), init_std_(other.init_std_) {
  for (const auto& p : other.params_) {
    Tensor t = p.value.detach();
    t.set_requires_grad(true);
    params_.push_back({p.name, t});
  }
}

EnergyModel& EnergyModel::operator=(const EnergyModel& other) {
  if (this != &other) {
    EnergyModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::vector<Tensor> EnergyModel::parameter_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

std::size_t EnergyModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

const Tensor& EnergyModel::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.value;
  throw std::out_of_range("EnergyModel: no parameter named '" + name + "'");
}

Tensor EnergyModel::encode_impl(const Tensor& windows) const {
  if (windows.rank() != 2 || windows.dim(1) != arch_.window_size())
    throw ad::ShapeError("encode: expected window batch [B," + std::to_string(arch_.window_size()) +
                         "], got " + ad::shape_str(windows.shape()));
  Tensor h = layer(0, "enc.l1", [&] {
    return ad::silu(ad::linear(windows, param("enc.l1.w"), param("enc.l1.b")));
  });
  return layer(1, "enc.l2", [&] { return ad::linear(h, param("enc.l2.w"), param("enc.l2.b")); });
}

Tensor EnergyModel::encode(const Tensor& windows) const { return encode_impl(windows); }

Tensor EnergyModel::forward(const Tensor& z, const Tensor& y) const {
  if (z.rank() != 2 || z.dim(1) != arch_.embed_dim)
    throw ad::ShapeError("forward: expected context [B," + std::to_string(arch_.embed_dim) +
                         "], got " + ad::shape_str(z.shape()));
  if (y.rank() != 2 || y.dim(1) != arch_.action_size() || y.dim(0) != z.dim(0))
    throw ad::ShapeError("forward: expected actions [" + std::to_string(z.dim(0)) + "," +
                         std::to_string(arch_.action_size()) + "], got " + ad::shape_str(y.shape()));
  return arch_.backbone == Backbone::mlp ? mlp_forward(z, y) : transformer_forward(z, y);
}

Tensor EnergyModel::energy(const Tensor& z, const Tensor& y) const {
  if (arch_.head != Head::energy) throw std::logic_error("energy: model has a noise head");
  Tensor out = forward(z, y);
  return ad::reshape(out, {out.dim(0)});
}

Tensor EnergyModel::mlp_forward(const Tensor& z, const Tensor& y) const {
  Tensor h = ad::concat({z, y}, 1);
  for (std::size_t i = 0; i < arch_.mlp_depth; ++i) {
    const std::string p = "mlp.l" + std::to_string(i);
    h = layer(2 + i, p, [&] { return ad::silu(ad::linear(h, param(p + ".w"), param(p + ".b"))); });
  }
  return layer(2 + arch_.mlp_depth, "head",
               [&] { return ad::linear(h, param("head.w"), param("head.b")); });
}

Tensor EnergyModel::attention(const Tensor& q_in, const Tensor& kv_in,
                              const std::string& prefix) const {
  const std::size_t w = arch_.tf_width;
  const std::size_t heads = arch_.tf_heads;
  const std::size_t dh = w / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = ad::linear(q_in, param(prefix + ".q.w"), param(prefix + ".q.b"));
  Tensor k = ad::linear(kv_in, param(prefix + ".k.w"), param(prefix + ".k.b"));
  Tensor v = ad::linear(kv_in, param(prefix + ".v.w"), param(prefix + ".v.b"));
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = ad::slice(q, 2, h * dh, (h + 1) * dh);
    Tensor kh = ad::slice(k, 2, h * dh, (h + 1) * dh);
    Tensor vh = ad::slice(v, 2, h * dh, (h + 1) * dh);
    Tensor att = ad::softmax_last(ad::scale(ad::bmm(qh, ad::transpose(kh)), inv));
    outs.push_back(ad::bmm(att, vh));
  }
  Tensor o = heads == 1 ? outs[0] : ad::concat(outs, 2);
  return ad::linear(o, param(prefix + ".o.w"), param(prefix + ".o.b"));
}

Tensor EnergyModel::transformer_forward(const Tensor& z, const Tensor& y) const {
  const auto& a = arch_;
  const std::size_t bs = y.dim(0);
  const std::size_t w = a.tf_width;
  std::size_t li = 2;

  Tensor x = layer(li++, "tf.in", [&] {
    Tensor tokens = ad::reshape(y, {bs, a.horizon, a.action_dim});
    return ad::add(ad::linear(tokens, param("tf.in.w"), param("tf.in.b")), param("tf.pos"));
  });
  Tensor ctx = layer(li++, "tf.ctx", [&] {
    return ad::reshape(ad::linear(z, param("tf.ctx.w"), param("tf.ctx.b")),
                       {bs, a.context_tokens, w});
  });
  for (std::size_t b = 0; b < a.tf_blocks; ++b) {
    const std::string p = "tf.b" + std::to_string(b);
    x = layer(li++, p + ".self", [&] {
      Tensor n = ad::rms_normalize(x);
      return ad::add(x, attention(n, n, p + ".self"));
    });
    x = layer(li++, p + ".cross", [&] {
      return ad::add(x, attention(ad::rms_normalize(x), ctx, p + ".cross"));
    });
    x = layer(li++, p + ".ff", [&] {
      Tensor h = ad::silu(ad::linear(ad::rms_normalize(x), param(p + ".ff1.w"), param(p + ".ff1.b")));
      return ad::add(x, ad::linear(h, param(p + ".ff2.w"), param(p + ".ff2.b")));
    });
  }
  return layer(li, "head", [&] {
    if (a.head == Head::energy) {
      // Mean over action tokens, then a scalar.
      Tensor pooled = ad::reshape(ad::mean_last(ad::transpose(x)), {bs, w});
      return ad::linear(pooled, param("head.w"), param("head.b"));
    }
    Tensor per_token = ad::linear(x, param("head.w"), param("head.b"));
    return ad::reshape(per_token, {bs, a.action_size()});
  });
}

Tensor stack_windows(const std::vector<ObservationWindow>& windows) {
  if (windows.empty()) throw std::invalid_argument("stack_windows: empty batch");
  const std::size_t width = windows[0].history * windows[0].obs_dim;
  std::vector<double> data;
  data.reserve(windows.size() * width);
  for (const auto& w : windows) {
    if (w.states.size() != width || w.history * w.obs_dim != width)
      throw ad::ShapeError("stack_windows: inconsistent window sizes");
    data.insert(data.end(), w.states.begin(), w.states.end());
  }
  return Tensor::from({windows.size(), width}, std::move(data));
}

Tensor stack_actions(const std::vector<ActionTrajectory>& trajectories) {
  if (trajectories.empty()) throw std::invalid_argument("stack_actions: empty batch");
  const std::size_t width = trajectories[0].horizon * trajectories[0].action_dim;
  std::vector<double> data;
  data.reserve(trajectories.size() * width);
  for (const auto& t : trajectories) {
    if (t.actions.size() != width) throw ad::ShapeError("stack_actions: inconsistent sizes");
    data.insert(data.end(), t.actions.begin(), t.actions.end());
  }
  return Tensor::from({trajectories.size(), width}, std::move(data));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'E', 'B', 'T', 'C', 'K', 'P', 'T', '1'};

using binio::Writer;
using Reader = binio::Reader<CheckpointError>;

std::vector<std::uint32_t> arch_fields(const Architecture& a) {
  auto c = [](std::size_t v) { return static_cast<std::uint32_t>(v); };
  return {static_cast<std::uint32_t>(a.backbone), static_cast<std::uint32_t>(a.head), c(a.obs_dim),
          c(a.history), c(a.horizon), c(a.action_dim), c(a.embed_dim), c(a.encoder_hidden),
          c(a.mlp_width), c(a.mlp_depth), c(a.tf_width), c(a.tf_blocks), c(a.tf_heads),
          c(a.context_tokens)};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const EnergyModel& model,
                                            const std::vector<NamedTensor>& extras) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kCheckpointVersion);
  for (std::uint32_t f : arch_fields(model.arch())) w.u32(f);
  w.f64(model.arch().head_init_scale);
  std::vector<const NamedTensor*> all;
  for (const auto& p : model.parameters()) all.push_back(&p);
  for (const auto& e : extras) all.push_back(&e);
  w.u32(static_cast<std::uint32_t>(all.size()));
  for (const auto* t : all) {
    w.u32(static_cast<std::uint32_t>(t->name.size()));
    w.bytes(t->name.data(), t->name.size());
    w.u32(static_cast<std::uint32_t>(t->value.rank()));
    for (std::size_t d : t->value.shape()) w.u64(d);
  }
  for (const auto* t : all)
    for (double v : t->value.data()) w.f64(v);
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "checkpoint");
  if (r.str(8) != std::string(kMagic, 8)) throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  auto& a = ck.arch;
  const std::uint32_t backbone = r.u32(), head = r.u32();
  if (backbone > 1 || head > 1) throw CheckpointError("corrupt architecture descriptor");
  a.backbone = static_cast<Backbone>(backbone);
  a.head = static_cast<Head>(head);
  for (std::size_t* f : {&a.obs_dim, &a.history, &a.horizon, &a.action_dim, &a.embed_dim,
                         &a.encoder_hidden, &a.mlp_width, &a.mlp_depth, &a.tf_width, &a.tf_blocks,
                         &a.tf_heads, &a.context_tokens})
    *f = r.u32();
  a.head_init_scale = r.f64();
  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, ad::Shape>> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    std::string name = r.str(len);
    const std::uint32_t rank = r.u32();
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    table.emplace_back(std::move(name), std::move(shape));
  }
  // Parameters come first; anything after the architecture's layout is an extra.
  Rng dummy(0);
  const EnergyModel probe(a, dummy);
  const std::size_t n_params = probe.parameters().size();
  if (table.size() < n_params) throw CheckpointError("checkpoint has too few tensors");
  for (std::size_t i = 0; i < table.size(); ++i) {
    std::vector<double> v(ad::numel_of(table[i].second));
    for (auto& x : v) x = r.f64();
    NamedTensor nt{table[i].first, Tensor::from(table[i].second, std::move(v))};
    (i < n_params ? ck.params : ck.extras).push_back(std::move(nt));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  try {
    EnergyModel check(a, ck.params);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint does not match its architecture: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const EnergyModel& model,
                     const std::vector<NamedTensor>& extras) {
  try {
    binio::write_file(path, encode_checkpoint(model, extras));
  } catch (const std::runtime_error& e) {
    throw CheckpointError(e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = binio::read_file(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(e.what());
  }
  return decode_checkpoint(bytes);
}

}  // namespace ebt::model
