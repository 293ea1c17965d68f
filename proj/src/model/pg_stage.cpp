#include "ehpe/pg_stage.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "ehpe/autodiff/ops.hpp"

namespace ehpe::pg {

using handsim::ConfigError;

// ---- graph ------------------------------------------------------------------

Adjacency Adjacency::from_edges(std::size_t n, std::span<const std::pair<std::size_t, std::size_t>> edges) {
  Adjacency a;
  a.n = n;
  a.mask.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) a.mask[i * n + i] = 1;
  for (auto [i, j] : edges) {
    if (i >= n || j >= n) throw ConfigError("edge endpoint out of range");
    a.mask[i * n + j] = a.mask[j * n + i] = 1;
  }
  return a;
}

Adjacency Adjacency::two_hop() const {
  Adjacency out = *this;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      if (at(i, k))
        for (std::size_t j = 0; j < n; ++j)
          if (at(k, j)) out.mask[i * n + j] = 1;
  return out;
}

std::vector<std::size_t> Adjacency::hop_distances(std::size_t from) const {
  std::vector<std::size_t> dist(n, n + 1);
  std::deque<std::size_t> q{from};
  dist[from] = 0;
  while (!q.empty()) {
    const std::size_t v = q.front();
    q.pop_front();
    for (std::size_t j = 0; j < n; ++j)
      if (at(v, j) && dist[j] > dist[v] + 1) {
        dist[j] = dist[v] + 1;
        q.push_back(j);
      }
  }
  return dist;
}

std::vector<std::pair<std::size_t, std::size_t>> kinematic_edges() {
  const auto sk = handsim::Skeleton::standard();
  std::vector<std::pair<std::size_t, std::size_t>> e;
  for (std::size_t j = 1; j < kNodes; ++j) e.emplace_back(static_cast<std::size_t>(sk.parent[j]), j);
  return e;
}

Adjacency hand_adjacency() {
  const auto e = kinematic_edges();
  return Adjacency::from_edges(kNodes, e);
}

// ---- config -------------------------------------------------------------------

void ModelConfig::validate() const {
  if (!spi && !fem)
    throw ConfigError("spi=false and fem=false leaves no PG branch (TW-only decoding); not a PG training config");
  if (image_h == 0 || image_w == 0 || depth == 0 || feature_channels == 0 || feature_h == 0 || feature_w == 0 ||
      feature_stride == 0)
    throw ConfigError("PG geometry fields must be positive");
  if (heads == 0 || hidden == 0 || hidden % heads != 0) throw ConfigError("hidden must be a positive multiple of heads");
  if (gat_layers == 0) throw ConfigError("gat_layers must be >= 1");
  if (fem_width == 0) throw ConfigError("fem_width must be positive");
  if (tw_guidance && tw_joints.empty()) throw ConfigError("TW guidance needs at least one TW joint");
  for (std::size_t i = 0; i < tw_joints.size(); ++i) {
    if (tw_joints[i] >= kNodes) throw ConfigError("TW joint index out of range");
    if (i > 0 && tw_joints[i] <= tw_joints[i - 1]) throw ConfigError("TW joint set must be sorted and unique");
  }
  if (pin_tw_joints && !tw_guidance) throw ConfigError("pin_tw_joints needs TW guidance");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"image_h", image_h},
          {"image_w", image_w},
          {"depth", depth},
          {"feature_channels", feature_channels},
          {"feature_h", feature_h},
          {"feature_w", feature_w},
          {"feature_stride", feature_stride},
          {"tw_joints", tw_joints},
          {"tw_guidance", tw_guidance},
          {"spi", spi},
          {"fem", fem},
          {"edge_mode", edge_mode == EdgeMode::kDynamic ? "dynamic" : "fixed"},
          {"gat_layers", gat_layers},
          {"heads", heads},
          {"hidden", hidden},
          {"fem_width", fem_width},
          {"fem_duplicate_tokens", fem_duplicate_tokens},
          {"pin_tw_joints", pin_tw_joints},
          {"embedding_init", embedding_init == EmbeddingInit::kMeanPose ? "mean_pose" : "zeros"}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    j.at("image_h").get_to(c.image_h);
    j.at("image_w").get_to(c.image_w);
    j.at("depth").get_to(c.depth);
    j.at("feature_channels").get_to(c.feature_channels);
    j.at("feature_h").get_to(c.feature_h);
    j.at("feature_w").get_to(c.feature_w);
    j.at("feature_stride").get_to(c.feature_stride);
    j.at("tw_joints").get_to(c.tw_joints);
    j.at("tw_guidance").get_to(c.tw_guidance);
    j.at("spi").get_to(c.spi);
    j.at("fem").get_to(c.fem);
    const auto mode = j.at("edge_mode").get<std::string>();
    if (mode != "dynamic" && mode != "fixed") throw ConfigError("edge_mode must be 'dynamic' or 'fixed'");
    c.edge_mode = mode == "dynamic" ? EdgeMode::kDynamic : EdgeMode::kFixed;
    j.at("gat_layers").get_to(c.gat_layers);
    j.at("heads").get_to(c.heads);
    j.at("hidden").get_to(c.hidden);
    j.at("fem_width").get_to(c.fem_width);
    j.at("fem_duplicate_tokens").get_to(c.fem_duplicate_tokens);
    j.at("pin_tw_joints").get_to(c.pin_tw_joints);
    const auto init = j.at("embedding_init").get<std::string>();
    if (init != "mean_pose" && init != "zeros") throw ConfigError("embedding_init must be 'mean_pose' or 'zeros'");
    c.embedding_init = init == "mean_pose" ? EmbeddingInit::kMeanPose : EmbeddingInit::kZeros;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("PG model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::matching(const tw::ModelConfig& t) {
  ModelConfig c;
  c.image_h = t.image_h;
  c.image_w = t.image_w;
  c.depth = handsim::kDepthBins;
  c.feature_channels = t.feature_channels();
  c.feature_h = t.feature_h();
  c.feature_w = t.feature_w();
  c.feature_stride = t.feature_stride;
  c.tw_joints = t.joints;
  return c;
}

handsim::Vec3 normalize(const ModelConfig& c, const handsim::Vec3& p) {
  const double hw = c.image_w / 2.0, hh = c.image_h / 2.0, hd = c.depth / 2.0;
  return {(p[0] - hw) / hw, (p[1] - hh) / hh, (p[2] - hd) / hd};
}

handsim::Vec3 denormalize(const ModelConfig& c, const handsim::Vec3& n) {
  const double hw = c.image_w / 2.0, hh = c.image_h / 2.0, hd = c.depth / 2.0;
  return {n[0] * hw + hw, n[1] * hh + hh, n[2] * hd + hd};
}

// ---- building blocks ------------------------------------------------------------

ad::Tensor linear(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor* bias) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(0))
    throw ad::ShapeError("linear: " + ad::to_string(x.shape()) + " x " + ad::to_string(w.shape()));
  ad::Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  ad::Tensor y = ad::reshape(ad::matmul(ad::reshape(x, {x.numel() / x.dim(-1), x.dim(-1)}), w), out_shape);
  return bias ? ad::add(y, *bias) : y;
}

namespace {

ad::Tensor batch_transpose(const ad::Tensor& x) { return ad::permute(x, {0, 2, 1}); }

// Broadcasts a [rows, d] tensor to [B, rows, d].
ad::Tensor tile_batch(const ad::Tensor& x, std::size_t B) {
  ad::Shape s = {B};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  return ad::add(x.tape().constant(s, std::vector<double>(ad::numel(s), 0.0)), x);
}

std::vector<double> mask_bias(const Adjacency& a) {
  std::vector<double> b(a.n * a.n);
  for (std::size_t i = 0; i < a.n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < a.n; ++j) {
      b[i * a.n + j] = a.at(i, j) ? 0.0 : -1e30;
      any = any || a.at(i, j);
    }
    if (!any) throw ConfigError("isolated node " + std::to_string(i) + " has an empty neighbourhood");
  }
  return b;
}

}  // namespace

Attention scaled_dot_attention(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1))
    throw ad::ShapeError("attention: q " + ad::to_string(q.shape()) + ", k " + ad::to_string(k.shape()) + ", v " +
                         ad::to_string(v.shape()));
  const double s = 1.0 / std::sqrt(static_cast<double>(q.dim(2)));
  Attention a;
  a.weights = ad::softmax(ad::scale(ad::bmm(q, batch_transpose(k)), s), -1);
  a.out = ad::bmm(a.weights, v);
  return a;
}

JointGraph assemble_joint_features(const ModelConfig& cfg, const ad::Tensor& tw_coords, const ad::Tensor& embedding,
                                   const ad::Tensor& featmap) {
  if (featmap.rank() != 4 || featmap.dim(1) != cfg.feature_channels || featmap.dim(2) != cfg.feature_h ||
      featmap.dim(3) != cfg.feature_w)
    throw ad::ShapeError("feature map " + ad::to_string(featmap.shape()) + " does not match the PG config");
  if (embedding.shape() != ad::Shape{kNodes, 3}) throw ad::ShapeError("embedding must be [21,3]");
  ad::Tape& tape = featmap.tape();
  const std::size_t B = featmap.dim(0);
  JointGraph g;
  if (cfg.tw_guidance) {
    const std::size_t Jt = cfg.tw_joints.size();
    if (!tw_coords.valid() || tw_coords.shape() != ad::Shape{B, Jt, 3})
      throw ad::ShapeError("missing or malformed TW joints: expected [" + std::to_string(B) + "," +
                           std::to_string(Jt) + ",3]");
    std::vector<std::size_t> pick(kNodes, Jt);
    std::vector<double> keep(kNodes, 1.0);
    for (std::size_t t = 0; t < Jt; ++t) {
      pick[cfg.tw_joints[t]] = t;
      keep[cfg.tw_joints[t]] = 0.0;
    }
    ad::Tensor padded = ad::concat({tw_coords, tape.constant({B, 1, 3}, std::vector<double>(B * 3, 0.0))}, 1);
    ad::Tensor scattered = ad::index_select(padded, 1, pick);
    g.coords = ad::add(scattered, ad::mul(embedding, tape.constant({kNodes, 1}, keep)));
  } else {
    g.coords = tile_batch(embedding, B);
  }
  // Normalized (x, y) -> feature-map cell coordinates.
  const double fs = static_cast<double>(cfg.feature_stride);
  const double hw = cfg.image_w / 2.0, hh = cfg.image_h / 2.0;
  ad::Tensor xy = ad::slice(g.coords, 2, 0, 2);
  ad::Tensor pts = ad::add(ad::mul(xy, tape.constant({2}, {hw / fs, hh / fs})),
                           tape.constant({2}, {(hw + 0.5) / fs - 0.5, (hh + 0.5) / fs - 0.5}));
  ad::Tensor sampled = ad::grid_sample_bilinear(featmap, pts);
  g.features = ad::concat({g.coords, sampled}, 2);
  return g;
}

GatOut gat_layer(const ad::Tensor& h, const ad::Tensor& w, const ad::Tensor& a, const Adjacency& nbr,
                 std::size_t heads) {
  if (h.rank() != 3 || h.dim(1) != nbr.n) throw ad::ShapeError("gat_layer: h must be [B,N,d] with N = graph size");
  if (w.rank() != 2 || w.dim(1) % heads != 0) throw ad::ShapeError("gat_layer: W width must split into heads");
  const std::size_t B = h.dim(0), N = nbr.n, Dh = w.dim(1) / heads;
  if (a.shape() != ad::Shape{heads, 2 * Dh}) throw ad::ShapeError("gat_layer: a must be [heads, 2*head_dim]");
  ad::Tape& tape = h.tape();
  const auto bias = tape.constant({N, N}, mask_bias(nbr));
  ad::Tensor wh = ad::permute(ad::reshape(linear(h, w), {B, N, heads, Dh}), {0, 2, 1, 3});  // [B,K,N,Dh]
  ad::Tensor a_src = ad::reshape(ad::slice(a, 1, 0, Dh), {heads, 1, Dh});
  ad::Tensor a_dst = ad::reshape(ad::slice(a, 1, Dh, 2 * Dh), {heads, 1, Dh});
  ad::Tensor s_src = ad::sum(ad::mul(wh, a_src), -1);  // [B,K,N]
  ad::Tensor s_dst = ad::sum(ad::mul(wh, a_dst), -1);
  ad::Tensor e = ad::add(ad::reshape(s_src, {B, heads, N, 1}), ad::reshape(s_dst, {B, heads, 1, N}));
  GatOut out;
  out.alpha = ad::softmax(ad::add(ad::leaky_relu(e), bias), -1);
  ad::Tensor agg = ad::bmm(ad::reshape(out.alpha, {B * heads, N, N}), ad::reshape(wh, {B * heads, N, Dh}));
  out.out = ad::reshape(ad::permute(ad::reshape(agg, {B, heads, N, Dh}), {0, 2, 1, 3}), {B, N, heads * Dh});
  return out;
}

GatOut gat_layer_fixed(const ad::Tensor& h, const ad::Tensor& w, const Adjacency& nbr, std::size_t heads) {
  if (h.rank() != 3 || h.dim(1) != nbr.n) throw ad::ShapeError("gat_layer: h must be [B,N,d] with N = graph size");
  const std::size_t B = h.dim(0), N = nbr.n, D = w.dim(1);
  std::vector<double> alpha(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    double deg = 0;
    for (std::size_t j = 0; j < N; ++j) deg += nbr.at(i, j);
    if (deg == 0) throw ConfigError("isolated node " + std::to_string(i) + " has an empty neighbourhood");
    for (std::size_t j = 0; j < N; ++j) alpha[i * N + j] = nbr.at(i, j) / deg;
  }
  ad::Tape& tape = h.tape();
  ad::Tensor A = tape.constant({N, N}, alpha);
  ad::Tensor wh = ad::reshape(ad::permute(linear(h, w), {1, 0, 2}), {N, B * D});
  GatOut out;
  out.out = ad::permute(ad::reshape(ad::matmul(A, wh), {N, B, D}), {1, 0, 2});
  std::vector<double> tiled;
  tiled.reserve(B * heads * N * N);
  for (std::size_t r = 0; r < B * heads; ++r) tiled.insert(tiled.end(), alpha.begin(), alpha.end());
  out.alpha = tape.constant({B, heads, N, N}, std::move(tiled));
  return out;
}

ad::Tensor fuse(const ad::Tensor* spi_out, const ad::Tensor* fem_out, const ad::Tensor& omega_g,
                const ad::Tensor& omega_e) {
  if (!spi_out && !fem_out) throw ConfigError("fuse needs at least one branch output");
  ad::Tensor out;
  if (spi_out) {
    const std::size_t B = spi_out->dim(0), N = spi_out->dim(1), C = spi_out->dim(2);
    if (omega_g.shape() != ad::Shape{N, N}) throw ad::ShapeError("omega_G must be [N,N]");
    ad::Tensor flat = ad::reshape(ad::permute(*spi_out, {1, 0, 2}), {N, B * C});
    out = ad::permute(ad::reshape(ad::matmul(omega_g, flat), {N, B, C}), {1, 0, 2});
  }
  if (fem_out) {
    if (omega_e.shape() != ad::Shape{fem_out->dim(1), 1}) throw ad::ShapeError("omega_E must be [N,1]");
    ad::Tensor f = ad::mul(*fem_out, omega_e);
    out = out.valid() ? ad::add(out, f) : f;
  }
  return out;
}

LossPG loss_pg(const ad::Tensor& pred, const ad::Tensor& target, const std::vector<ad::Tensor>& alphas,
               std::span<const std::pair<std::size_t, std::size_t>> edges, const LossWeights& lw) {
  if (pred.shape() != target.shape() || pred.rank() != 3 || pred.dim(2) != 3)
    throw ad::ShapeError("loss_pg: prediction " + ad::to_string(pred.shape()) + " vs target " +
                         ad::to_string(target.shape()));
  ad::Tape& tape = pred.tape();
  const std::size_t B = pred.dim(0), N = pred.dim(1);
  LossPG l;
  l.position = ad::scale(ad::sum(ad::square(ad::sub(pred, target))), 1.0 / static_cast<double>(B * N));
  l.edge = tape.constant_scalar(0.0);
  if (!edges.empty()) {
    std::vector<std::size_t> flat;
    for (auto [i, j] : edges) {
      if (i >= N || j >= N || i == j) throw ad::ShapeError("loss_pg: bad edge");
      flat.push_back(i * N + j);
      flat.push_back(j * N + i);
    }
    for (const auto& a : alphas) {
      if (a.rank() != 4 || a.dim(0) != B || a.dim(2) != N || a.dim(3) != N)
        throw ad::ShapeError("loss_pg: alpha must be [B,heads,N,N]");
      ad::Tensor picked = ad::index_select(ad::reshape(a, {B * a.dim(1), N * N}), 1, flat);
      l.edge = ad::add(l.edge, ad::sum(ad::square(ad::add_scalar(picked, -1.0))));
    }
    l.edge = ad::scale(l.edge, 1.0 / static_cast<double>(B));
  }
  l.total = ad::add(ad::scale(l.position, lw.position), ad::scale(l.edge, lw.edge));
  return l;
}

// ---- model --------------------------------------------------------------------

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  one_hop_ = hand_adjacency();
  two_hop_ = one_hop_.two_hop();
  std::mt19937_64 rng(seed);
  const std::size_t D0 = cfg_.node_dim(), H = cfg_.hidden, Dh = H / cfg_.heads, Wf = cfg_.fem_width;
  auto mat = [&](const std::string& name, std::size_t in, std::size_t out) -> ad::Parameter& {
    auto& p = params_.add(name, {in, out}, true);
    he_uniform(p, in, rng);
    return p;
  };
  params_.add("pg.embed", {kNodes, 3}, false);
  if (cfg_.spi) {
    for (std::size_t l = 0; l < cfg_.gat_layers; ++l) {
      const std::string n = "pg.gat" + std::to_string(l);
      mat(n + ".w", l == 0 ? D0 : H, H);
      if (cfg_.edge_mode == EdgeMode::kDynamic) mat(n + ".a", cfg_.heads, 2 * Dh);
      mat(n + ".skip", D0, H);
    }
    mat("pg.spi.head.w", H, 3);
    params_.add("pg.spi.head.b", {3}, false);
  }
  if (cfg_.fem) {
    mat("pg.fem.tok.w", cfg_.feature_channels, Wf);
    params_.add("pg.fem.tok.b", {Wf}, false);
    he_uniform(params_.add("pg.fem.pos", {cfg_.image_tokens(), Wf}, false), Wf, rng);
    he_uniform(params_.add("pg.fem.global", {1, Wf}, false), Wf, rng);
    for (const char* n : {"pg.fem.sa.q", "pg.fem.sa.k", "pg.fem.sa.v"}) mat(n, Wf, Wf);
    he_uniform(params_.add("pg.fem.query", {kNodes, Wf}, false), Wf, rng);
    mat("pg.fem.qin", D0, Wf);
    for (const char* n : {"pg.fem.ca.q", "pg.fem.ca.k", "pg.fem.ca.v"}) mat(n, Wf, Wf);
    mat("pg.fem.head.w1", Wf, Wf);
    params_.add("pg.fem.head.b1", {Wf}, false);
    mat("pg.fem.head.w2", Wf, 3);
    params_.add("pg.fem.head.b2", {3}, false);
  }
  auto& og = params_.add("pg.fuse.omega_g", {kNodes, kNodes}, false);
  for (std::size_t i = 0; i < kNodes; ++i) og.value[i * kNodes + i] = 1.0;
  fill(params_.add("pg.fuse.omega_e", {kNodes, 1}, false), 1.0);
}

void Model::set_embedding(const std::array<handsim::Vec3, kNodes>& coords) {
  auto& e = params_.get("pg.embed");
  for (std::size_t j = 0; j < kNodes; ++j)
    for (std::size_t k = 0; k < 3; ++k) e.value[j * 3 + k] = coords[j][k];
}

ad::Tensor skip_fusion(const ad::Tensor& gat_out, const ad::Tensor& h0, const ad::Tensor& w_skip) {
  return ad::leaky_relu(ad::add(gat_out, linear(h0, w_skip)));
}

SpiOut Model::spi_forward(ad::Tape& tape, const JointGraph& g) {
  SpiOut out;
  const ad::Tensor& h0 = g.features;
  ad::Tensor h = h0;
  for (std::size_t l = 0; l < cfg_.gat_layers; ++l) {
    const std::string n = "pg.gat" + std::to_string(l);
    const Adjacency& nbr = l == 0 ? one_hop_ : two_hop_;
    ad::Tensor w = tape.param(params_.get(n + ".w"));
    GatOut gat = cfg_.edge_mode == EdgeMode::kDynamic
                     ? gat_layer(h, w, tape.param(params_.get(n + ".a")), nbr, cfg_.heads)
                     : gat_layer_fixed(h, w, nbr, cfg_.heads);
    h = skip_fusion(gat.out, h0, tape.param(params_.get(n + ".skip")));
    out.alphas.push_back(gat.alpha);
  }
  ad::Tensor b = tape.param(params_.get("pg.spi.head.b"));
  out.coords = linear(h, tape.param(params_.get("pg.spi.head.w")), &b);
  return out;
}

FemOut Model::fem_forward(ad::Tape& tape, const ad::Tensor& featmap, const JointGraph& g) {
  const std::size_t B = featmap.dim(0), C = featmap.dim(1), T = cfg_.image_tokens();
  auto P = [&](const char* name) { return tape.param(params_.get(name)); };
  ad::Tensor tok_b = P("pg.fem.tok.b");
  ad::Tensor img = linear(ad::reshape(ad::permute(featmap, {0, 2, 3, 1}), {B, T, C}), P("pg.fem.tok.w"), &tok_b);
  ad::Tensor with_pos = ad::add(img, P("pg.fem.pos"));
  ad::Tensor global = tile_batch(P("pg.fem.global"), B);
  ad::Tensor x = cfg_.fem_duplicate_tokens ? ad::concat({img, with_pos, global}, 1) : ad::concat({with_pos, global}, 1);

  FemOut out;
  Attention sa = scaled_dot_attention(linear(x, P("pg.fem.sa.q")), linear(x, P("pg.fem.sa.k")),
                                      linear(x, P("pg.fem.sa.v")));
  out.self_attention = sa.weights;
  x = ad::add(x, sa.out);

  ad::Tensor q0 = ad::add(linear(g.features, P("pg.fem.qin")), P("pg.fem.query"));
  Attention ca = scaled_dot_attention(linear(q0, P("pg.fem.ca.q")), linear(x, P("pg.fem.ca.k")),
                                      linear(x, P("pg.fem.ca.v")));
  out.cross_attention = ca.weights;
  ad::Tensor z = ad::add(q0, ca.out);
  ad::Tensor b1 = P("pg.fem.head.b1"), b2 = P("pg.fem.head.b2");
  out.coords = linear(ad::leaky_relu(linear(z, P("pg.fem.head.w1"), &b1)), P("pg.fem.head.w2"), &b2);
  return out;
}

Outputs Model::forward(ad::Tape& tape, const ad::Tensor& tw_coords, const ad::Tensor& featmap) {
  Outputs o;
  o.graph = assemble_joint_features(cfg_, tw_coords, tape.param(params_.get("pg.embed")), featmap);
  if (cfg_.spi) o.spi = spi_forward(tape, o.graph);
  if (cfg_.fem) o.fem = fem_forward(tape, featmap, o.graph);
  o.coords = fuse(cfg_.spi ? &o.spi.coords : nullptr, cfg_.fem ? &o.fem.coords : nullptr,
                  tape.param(params_.get("pg.fuse.omega_g")), tape.param(params_.get("pg.fuse.omega_e")));
  if (cfg_.pin_tw_joints) {
    const std::size_t B = featmap.dim(0), Jt = cfg_.tw_joints.size();
    std::vector<std::size_t> pick(kNodes, Jt);
    std::vector<double> keep(kNodes, 1.0);
    for (std::size_t t = 0; t < Jt; ++t) {
      pick[cfg_.tw_joints[t]] = t;
      keep[cfg_.tw_joints[t]] = 0.0;
    }
    ad::Tensor padded = ad::concat({tw_coords, tape.constant({B, 1, 3}, std::vector<double>(B * 3, 0.0))}, 1);
    o.coords = ad::add(ad::mul(o.coords, tape.constant({kNodes, 1}, keep)), ad::index_select(padded, 1, pick));
  }
  return o;
}

}  // namespace ehpe::pg
