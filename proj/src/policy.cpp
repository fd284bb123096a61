#include "flexicup/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "flexicup/device.hpp"
#include "flexicup/emulator.hpp"
#include "flexicup/error.hpp"
#include "flexicup/physics.hpp"

namespace flexicup::policy {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Nominal scales bringing the raw state vector to O(1) for the encoder.
constexpr std::array<double, 8> kStateScale = {1.0 / 20.0, 1.0 / 20.0, 1.0 / 10.0,
                                               1.0 / 20.0, 1.0,        1.0,
                                               1.0 / 101.325, 1.0};

int conv_out(int n) { return (n - 1) / 2 + 1; }  // 3x3, stride 2, pad 1

}  // namespace

const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoAttention: return "no-attention";
    case Ablation::NoPeripheral: return "no-peripheral";
    case Ablation::NoCentral: return "no-central";
    case Ablation::WorkspaceOnly: return "workspace-only";
  }
  return "?";
}

Ablation ablation_from_string(const std::string& s) {
  for (Ablation a : {Ablation::Full, Ablation::NoAttention, Ablation::NoPeripheral,
                     Ablation::NoCentral, Ablation::WorkspaceOnly})
    if (s == to_string(a)) return a;
  throw ParamError("unknown ablation: " + s);
}

PolicyConfig PolicyConfig::paper_scale() {
  PolicyConfig c;
  c.d_model = 512;
  c.heads = 8;
  c.history = 8;
  c.horizon = 48;
  return c;
}

PolicyConfig PolicyConfig::micro() {
  PolicyConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.history = 1;
  c.horizon = 2;
  c.img_px = 8;
  c.conv_ch = {2, 3, 4};
  c.denoiser_hidden = 12;
  c.t_embed = 4;
  return c;
}

int PolicyConfig::cond_per_obs() const {
  // Two-stage integration: workspace features join the attended suction
  // features, then the state encoding.
  return ablation == Ablation::WorkspaceOnly ? 2 * d_model : 3 * d_model;
}

int PolicyConfig::denoiser_in() const {
  return history * cond_per_obs() + chunk_len() + t_embed;
}

void PolicyConfig::validate() const {
  if (d_model <= 0 || heads <= 0 || d_model % heads != 0)
    throw ParamError("d_model must be a positive multiple of heads");
  if (history < 1 || horizon < 1) throw ParamError("history and horizon must be >= 1");
  if (img_px < 8 || img_px % 8 != 0) throw ParamError("img_px must be a multiple of 8");
  if (t_embed <= 0 || t_embed % 2 != 0) throw ParamError("t_embed must be even");
  for (int c : conv_ch)
    if (c <= 0) throw ParamError("conv channels must be positive");
  if (denoiser_hidden <= 0) throw ParamError("denoiser_hidden must be positive");
}

// ---- parameter construction ---------------------------------------------

namespace {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  return n;
}

void add_block(std::vector<ParamBlock>& blocks, std::string name,
               std::vector<int> shape) {
  ParamBlock b;
  b.name = std::move(name);
  b.shape = std::move(shape);
  b.w.assign(shape_size(b.shape), 0.0);
  b.g.assign(b.w.size(), 0.0);
  b.v.assign(b.w.size(), 0.0);
  blocks.push_back(std::move(b));
}

void add_linear(std::vector<ParamBlock>& blocks, const std::string& prefix, int out,
                int in) {
  add_block(blocks, prefix + ".w", {out, in});
  add_block(blocks, prefix + ".b", {out});
}

void add_encoder(std::vector<ParamBlock>& blocks, const std::string& prefix,
                 const PolicyConfig& cfg) {
  add_block(blocks, prefix + ".conv1.w", {cfg.conv_ch[0], 1, 3, 3});
  add_block(blocks, prefix + ".conv1.b", {cfg.conv_ch[0]});
  add_block(blocks, prefix + ".conv2.w", {cfg.conv_ch[1], cfg.conv_ch[0], 3, 3});
  add_block(blocks, prefix + ".conv2.b", {cfg.conv_ch[1]});
  add_block(blocks, prefix + ".conv3.w", {cfg.conv_ch[2], cfg.conv_ch[1], 3, 3});
  add_block(blocks, prefix + ".conv3.b", {cfg.conv_ch[2]});
  add_linear(blocks, prefix + ".proj", cfg.d_model, cfg.conv_ch[2]);
}

bool has_central(const PolicyConfig& cfg) {
  return cfg.ablation != Ablation::NoCentral && cfg.ablation != Ablation::WorkspaceOnly;
}
bool has_peripheral(const PolicyConfig& cfg) {
  return cfg.ablation != Ablation::NoPeripheral &&
         cfg.ablation != Ablation::WorkspaceOnly;
}
bool has_attention(const PolicyConfig& cfg) {
  return cfg.ablation != Ablation::NoAttention &&
         cfg.ablation != Ablation::WorkspaceOnly;
}
bool has_fuse_linear(const PolicyConfig& cfg) {
  return cfg.ablation == Ablation::NoAttention;
}

}  // namespace

PolicyParams PolicyParams::init(const PolicyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PolicyParams p;
  p.cfg = cfg;
  auto& blocks = p.blocks;

  add_encoder(blocks, "enc_workspace", cfg);
  if (has_central(cfg)) add_encoder(blocks, "enc_central", cfg);
  if (has_peripheral(cfg)) add_encoder(blocks, "enc_peripheral", cfg);
  add_linear(blocks, "enc_state.fc1", cfg.d_model, 8);
  add_linear(blocks, "enc_state.fc2", cfg.d_model, cfg.d_model);
  if (has_attention(cfg)) {
    for (const char* n : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
      add_linear(blocks, n, cfg.d_model, cfg.d_model);
  }
  if (has_fuse_linear(cfg)) add_linear(blocks, "fuse", cfg.d_model, 2 * cfg.d_model);
  add_linear(blocks, "denoiser.fc1", cfg.denoiser_hidden, cfg.denoiser_in());
  add_linear(blocks, "denoiser.fc2", cfg.denoiser_hidden, cfg.denoiser_hidden);
  add_linear(blocks, "denoiser.fc3", cfg.chunk_len(), cfg.denoiser_hidden);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& b : blocks) {
    if (b.name.ends_with(".b")) continue;  // biases start at zero
    int fan_in = 1;
    if (b.shape.size() == 2) fan_in = b.shape[1];
    else if (b.shape.size() == 4) fan_in = b.shape[1] * b.shape[2] * b.shape[3];
    const double scale = std::sqrt(2.0 / fan_in);
    for (double& w : b.w) w = scale * normal(rng);
  }
  return p;
}

std::size_t PolicyParams::param_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.size();
  return n;
}

ParamBlock* PolicyParams::find(const std::string& name) {
  for (auto& b : blocks)
    if (b.name == name) return &b;
  return nullptr;
}
const ParamBlock* PolicyParams::find(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.name == name) return &b;
  return nullptr;
}

// ---- layer primitives ----------------------------------------------------

namespace {

const ParamBlock& need(const PolicyParams& p, const std::string& name) {
  const ParamBlock* b = p.find(name);
  if (!b) throw ParamError("missing parameter block " + name);
  return *b;
}
ParamBlock& need(PolicyParams& p, const std::string& name) {
  ParamBlock* b = p.find(name);
  if (!b) throw ParamError("missing parameter block " + name);
  return *b;
}

void linear_fwd(const ParamBlock& W, const ParamBlock& b, const double* x, double* y) {
  const int out = W.shape[0], in = W.shape[1];
  for (int o = 0; o < out; ++o) {
    double acc = b.w[o];
    const double* row = W.w.data() + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

// Accumulates parameter grads; dx may be null when the input is a leaf.
void linear_bwd(ParamBlock& W, ParamBlock& b, const double* x, const double* dy,
                double* dx) {
  const int out = W.shape[0], in = W.shape[1];
  if (dx) std::fill(dx, dx + in, 0.0);
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    b.g[o] += g;
    const double* row = W.w.data() + static_cast<std::size_t>(o) * in;
    double* grow = W.g.data() + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) {
      grow[i] += g * x[i];
      if (dx) dx[i] += g * row[i];
    }
  }
}

void relu_fwd(const double* x, double* y, int n, bool identity) {
  if (identity) {
    std::copy(x, x + n, y);
    return;
  }
  for (int i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd(const double* x, const double* dy, double* dx, int n, bool identity) {
  if (identity) {
    std::copy(dy, dy + n, dx);
    return;
  }
  for (int i = 0; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

void conv3x3s2_fwd(const ParamBlock& W, const ParamBlock& b, const double* x, int ci,
                   int h, int w, double* y) {
  const int co = W.shape[0];
  const int oh = conv_out(h), ow = conv_out(w);
  for (int c = 0; c < co; ++c) {
    double* yp = y + static_cast<std::size_t>(c) * oh * ow;
    std::fill(yp, yp + static_cast<std::size_t>(oh) * ow, b.w[c]);
    for (int ic = 0; ic < ci; ++ic) {
      const double* xp = x + static_cast<std::size_t>(ic) * h * w;
      const double* k = W.w.data() + ((static_cast<std::size_t>(c) * ci + ic) * 9);
      for (int oy = 0; oy < oh; ++oy) {
        const int iy0 = 2 * oy - 1;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = iy0 + ky;
          if (iy < 0 || iy >= h) continue;
          const double* xrow = xp + static_cast<std::size_t>(iy) * w;
          double* yrow = yp + static_cast<std::size_t>(oy) * ow;
          const double k0 = k[ky * 3], k1 = k[ky * 3 + 1], k2 = k[ky * 3 + 2];
          for (int ox = 0; ox < ow; ++ox) {
            const int ix0 = 2 * ox - 1;
            double acc = 0.0;
            if (ix0 >= 0) acc += k0 * xrow[ix0];
            if (ix0 + 1 < w) acc += k1 * xrow[ix0 + 1];
            if (ix0 + 2 < w) acc += k2 * xrow[ix0 + 2];
            yrow[ox] += acc;
          }
        }
      }
    }
  }
}

void conv3x3s2_bwd(ParamBlock& W, ParamBlock& b, const double* x, int ci, int h, int w,
                   const double* dy, double* dx) {
  const int co = W.shape[0];
  const int oh = conv_out(h), ow = conv_out(w);
  if (dx) std::fill(dx, dx + static_cast<std::size_t>(ci) * h * w, 0.0);
  for (int c = 0; c < co; ++c) {
    const double* dyp = dy + static_cast<std::size_t>(c) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) b.g[c] += dyp[static_cast<std::size_t>(oy) * ow + ox];
    for (int ic = 0; ic < ci; ++ic) {
      const double* xp = x + static_cast<std::size_t>(ic) * h * w;
      double* dxp = dx ? dx + static_cast<std::size_t>(ic) * h * w : nullptr;
      const std::size_t kbase = (static_cast<std::size_t>(c) * ci + ic) * 9;
      const double* k = W.w.data() + kbase;
      double* gk = W.g.data() + kbase;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy0 = 2 * oy - 1;
        const double* dyrow = dyp + static_cast<std::size_t>(oy) * ow;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = iy0 + ky;
          if (iy < 0 || iy >= h) continue;
          const double* xrow = xp + static_cast<std::size_t>(iy) * w;
          double* dxrow = dxp ? dxp + static_cast<std::size_t>(iy) * w : nullptr;
          for (int kx = 0; kx < 3; ++kx) {
            const double kv = k[ky * 3 + kx];
            double gacc = 0.0;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = 2 * ox - 1 + kx;
              if (ix < 0 || ix >= w) continue;
              const double g = dyrow[ox];
              gacc += g * xrow[ix];
              if (dxrow) dxrow[ix] += g * kv;
            }
            gk[ky * 3 + kx] += gacc;
          }
        }
      }
    }
  }
}

// ---- forward caches ------------------------------------------------------

struct EncoderCache {
  std::vector<double> x;               // input image (1 x P x P)
  std::vector<double> c1, a1, c2, a2, c3, a3;
  std::vector<double> gap;             // ch2
  std::vector<double> f;               // d
};

struct StateCache {
  std::array<double, 8> x{};
  std::vector<double> h1pre, h1, f;
};

struct AttnCache {
  std::vector<double> x;        // 2 x d tokens
  std::vector<double> q, k, v;  // 2 x d each
  std::vector<double> a;        // heads x 2 x 2
  std::vector<double> o;        // 2 x d concat of heads
  std::vector<double> out;      // 2 x d
};

struct ObsCache {
  EncoderCache ws, central, peripheral;
  StateCache state;
  AttnCache attn;
  std::vector<double> fuse_in;  // 2d (no-attention path)
  std::vector<double> fused;    // d
};

struct DenoiserCache {
  std::vector<double> z, h1pre, h1, h2pre, h2, eps;
};

struct SampleCache {
  std::vector<ObsCache> obs;
  DenoiserCache den;
};

void encoder_fwd(const PolicyParams& p, const std::string& prefix,
                 const std::vector<double>& img, EncoderCache& c) {
  const auto& cfg = p.cfg;
  const int P = cfg.img_px;
  if (static_cast<int>(img.size()) != P * P)
    throw ParamError(prefix + ": image size mismatch");
  const int p1 = conv_out(P), p2 = conv_out(p1), p3 = conv_out(p2);
  const int ch0 = cfg.conv_ch[0], ch1 = cfg.conv_ch[1], ch2 = cfg.conv_ch[2];
  c.x = img;
  c.c1.resize(static_cast<std::size_t>(ch0) * p1 * p1);
  c.a1.resize(c.c1.size());
  c.c2.resize(static_cast<std::size_t>(ch1) * p2 * p2);
  c.a2.resize(c.c2.size());
  c.c3.resize(static_cast<std::size_t>(ch2) * p3 * p3);
  c.a3.resize(c.c3.size());
  conv3x3s2_fwd(need(p, prefix + ".conv1.w"), need(p, prefix + ".conv1.b"), c.x.data(),
                1, P, P, c.c1.data());
  relu_fwd(c.c1.data(), c.a1.data(), static_cast<int>(c.c1.size()), cfg.identity_activations);
  conv3x3s2_fwd(need(p, prefix + ".conv2.w"), need(p, prefix + ".conv2.b"), c.a1.data(),
                ch0, p1, p1, c.c2.data());
  relu_fwd(c.c2.data(), c.a2.data(), static_cast<int>(c.c2.size()), cfg.identity_activations);
  conv3x3s2_fwd(need(p, prefix + ".conv3.w"), need(p, prefix + ".conv3.b"), c.a2.data(),
                ch1, p2, p2, c.c3.data());
  relu_fwd(c.c3.data(), c.a3.data(), static_cast<int>(c.c3.size()), cfg.identity_activations);
  c.gap.assign(ch2, 0.0);
  const int area = p3 * p3;
  for (int ch = 0; ch < ch2; ++ch) {
    double acc = 0.0;
    const double* ap = c.a3.data() + static_cast<std::size_t>(ch) * area;
    for (int i = 0; i < area; ++i) acc += ap[i];
    c.gap[ch] = acc / area;
  }
  c.f.resize(cfg.d_model);
  linear_fwd(need(p, prefix + ".proj.w"), need(p, prefix + ".proj.b"), c.gap.data(),
             c.f.data());
}

void encoder_bwd(PolicyParams& p, const std::string& prefix, const EncoderCache& c,
                 const double* df) {
  const auto& cfg = p.cfg;
  const int P = cfg.img_px;
  const int p1 = conv_out(P), p2 = conv_out(p1), p3 = conv_out(p2);
  const int ch0 = cfg.conv_ch[0], ch1 = cfg.conv_ch[1], ch2 = cfg.conv_ch[2];
  std::vector<double> dgap(ch2);
  linear_bwd(need(p, prefix + ".proj.w"), need(p, prefix + ".proj.b"), c.gap.data(), df,
             dgap.data());
  const int area = p3 * p3;
  std::vector<double> da3(c.a3.size());
  for (int ch = 0; ch < ch2; ++ch) {
    const double g = dgap[ch] / area;
    double* dp = da3.data() + static_cast<std::size_t>(ch) * area;
    std::fill(dp, dp + area, g);
  }
  std::vector<double> dc3(c.c3.size());
  relu_bwd(c.c3.data(), da3.data(), dc3.data(), static_cast<int>(dc3.size()),
           cfg.identity_activations);
  std::vector<double> da2(c.a2.size());
  conv3x3s2_bwd(need(p, prefix + ".conv3.w"), need(p, prefix + ".conv3.b"), c.a2.data(),
                ch1, p2, p2, dc3.data(), da2.data());
  std::vector<double> dc2(c.c2.size());
  relu_bwd(c.c2.data(), da2.data(), dc2.data(), static_cast<int>(dc2.size()),
           cfg.identity_activations);
  std::vector<double> da1(c.a1.size());
  conv3x3s2_bwd(need(p, prefix + ".conv2.w"), need(p, prefix + ".conv2.b"), c.a1.data(),
                ch0, p1, p1, dc2.data(), da1.data());
  std::vector<double> dc1(c.c1.size());
  relu_bwd(c.c1.data(), da1.data(), dc1.data(), static_cast<int>(dc1.size()),
           cfg.identity_activations);
  conv3x3s2_bwd(need(p, prefix + ".conv1.w"), need(p, prefix + ".conv1.b"), c.x.data(),
                1, P, P, dc1.data(), nullptr);
}

void state_fwd(const PolicyParams& p, const std::array<double, 8>& s, StateCache& c) {
  const auto& cfg = p.cfg;
  for (int i = 0; i < 8; ++i) c.x[i] = s[i] * kStateScale[i];
  c.h1pre.resize(cfg.d_model);
  c.h1.resize(cfg.d_model);
  c.f.resize(cfg.d_model);
  linear_fwd(need(p, "enc_state.fc1.w"), need(p, "enc_state.fc1.b"), c.x.data(),
             c.h1pre.data());
  relu_fwd(c.h1pre.data(), c.h1.data(), cfg.d_model, cfg.identity_activations);
  linear_fwd(need(p, "enc_state.fc2.w"), need(p, "enc_state.fc2.b"), c.h1.data(),
             c.f.data());
}

void state_bwd(PolicyParams& p, const StateCache& c, const double* df) {
  const auto& cfg = p.cfg;
  std::vector<double> dh1(cfg.d_model), dh1pre(cfg.d_model);
  linear_bwd(need(p, "enc_state.fc2.w"), need(p, "enc_state.fc2.b"), c.h1.data(), df,
             dh1.data());
  relu_bwd(c.h1pre.data(), dh1.data(), dh1pre.data(), cfg.d_model,
           cfg.identity_activations);
  linear_bwd(need(p, "enc_state.fc1.w"), need(p, "enc_state.fc1.b"), c.x.data(),
             dh1pre.data(), nullptr);
}

void attn_fwd(const PolicyParams& p, const double* t0, const double* t1, AttnCache& c) {
  const int d = p.cfg.d_model, heads = p.cfg.heads, dh = d / heads;
  c.x.resize(2 * d);
  std::copy(t0, t0 + d, c.x.begin());
  std::copy(t1, t1 + d, c.x.begin() + d);
  c.q.resize(2 * d);
  c.k.resize(2 * d);
  c.v.resize(2 * d);
  for (int i = 0; i < 2; ++i) {
    linear_fwd(need(p, "attn.wq.w"), need(p, "attn.wq.b"), c.x.data() + i * d,
               c.q.data() + i * d);
    linear_fwd(need(p, "attn.wk.w"), need(p, "attn.wk.b"), c.x.data() + i * d,
               c.k.data() + i * d);
    linear_fwd(need(p, "attn.wv.w"), need(p, "attn.wv.b"), c.x.data() + i * d,
               c.v.data() + i * d);
  }
  c.a.assign(static_cast<std::size_t>(heads) * 4, 0.0);
  c.o.assign(2 * d, 0.0);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < 2; ++i) {
      double logits[2];
      for (int j = 0; j < 2; ++j) {
        double dot = 0.0;
        for (int e = 0; e < dh; ++e) dot += c.q[i * d + off + e] * c.k[j * d + off + e];
        logits[j] = dot * inv_sqrt;
      }
      const double m = std::max(logits[0], logits[1]);
      const double e0 = std::exp(logits[0] - m), e1 = std::exp(logits[1] - m);
      const double z = e0 + e1;
      const double a0 = e0 / z, a1 = e1 / z;
      c.a[static_cast<std::size_t>(h) * 4 + i * 2] = a0;
      c.a[static_cast<std::size_t>(h) * 4 + i * 2 + 1] = a1;
      for (int e = 0; e < dh; ++e)
        c.o[i * d + off + e] = a0 * c.v[off + e] + a1 * c.v[d + off + e];
    }
  }
  c.out.resize(2 * d);
  for (int i = 0; i < 2; ++i)
    linear_fwd(need(p, "attn.wo.w"), need(p, "attn.wo.b"), c.o.data() + i * d,
               c.out.data() + i * d);
}

// dtok0/dtok1 receive gradients for the two input tokens. The scale knob
// multiplies what lands in the attn.* parameter grads (fault injection for
// the grad-check negative control).
void attn_bwd(PolicyParams& p, const AttnCache& c, const double* dout0,
              const double* dout1, double* dtok0, double* dtok1, double scale) {
  const int d = p.cfg.d_model, heads = p.cfg.heads, dh = d / heads;
  auto& wq = need(p, "attn.wq.w");
  auto& bq = need(p, "attn.wq.b");
  auto& wk = need(p, "attn.wk.w");
  auto& bk = need(p, "attn.wk.b");
  auto& wv = need(p, "attn.wv.w");
  auto& bv = need(p, "attn.wv.b");
  auto& wo = need(p, "attn.wo.w");
  auto& bo = need(p, "attn.wo.b");

  // Scaled accumulation: stash honest grads in temporaries, add scaled.
  auto accum = [&](ParamBlock& blk, const std::vector<double>& delta) {
    for (std::size_t i = 0; i < blk.g.size(); ++i) blk.g[i] += scale * delta[i];
  };

  std::vector<double> gwo(wo.w.size(), 0.0), gbo(bo.w.size(), 0.0);
  std::vector<double> dO(2 * d, 0.0);
  const double* douts[2] = {dout0, dout1};
  for (int i = 0; i < 2; ++i) {
    for (int o = 0; o < d; ++o) {
      const double g = douts[i][o];
      gbo[o] += g;
      const double* row = wo.w.data() + static_cast<std::size_t>(o) * d;
      double* grow = gwo.data() + static_cast<std::size_t>(o) * d;
      for (int e = 0; e < d; ++e) {
        grow[e] += g * c.o[i * d + e];
        dO[i * d + e] += g * row[e];
      }
    }
  }
  accum(wo, gwo);
  accum(bo, gbo);

  std::vector<double> dq(2 * d, 0.0), dk(2 * d, 0.0), dv(2 * d, 0.0);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < 2; ++i) {
      const double a0 = c.a[static_cast<std::size_t>(h) * 4 + i * 2];
      const double a1 = c.a[static_cast<std::size_t>(h) * 4 + i * 2 + 1];
      double da0 = 0.0, da1 = 0.0;
      for (int e = 0; e < dh; ++e) {
        const double g = dO[i * d + off + e];
        da0 += g * c.v[off + e];
        da1 += g * c.v[d + off + e];
        dv[off + e] += g * a0;
        dv[d + off + e] += g * a1;
      }
      // softmax backward over the two keys
      const double dot = a0 * da0 + a1 * da1;
      const double dl0 = a0 * (da0 - dot), dl1 = a1 * (da1 - dot);
      for (int e = 0; e < dh; ++e) {
        dq[i * d + off + e] += inv_sqrt * (dl0 * c.k[off + e] + dl1 * c.k[d + off + e]);
        dk[off + e] += inv_sqrt * dl0 * c.q[i * d + off + e];
        dk[d + off + e] += inv_sqrt * dl1 * c.q[i * d + off + e];
      }
    }
  }

  std::fill(dtok0, dtok0 + d, 0.0);
  std::fill(dtok1, dtok1 + d, 0.0);
  double* dtoks[2] = {dtok0, dtok1};
  struct Proj {
    ParamBlock* W;
    ParamBlock* b;
    const std::vector<double>* dy;
  };
  const Proj projs[3] = {{&wq, &bq, &dq}, {&wk, &bk, &dk}, {&wv, &bv, &dv}};
  for (const auto& pr : projs) {
    std::vector<double> gw(pr.W->w.size(), 0.0), gb(pr.b->w.size(), 0.0);
    for (int i = 0; i < 2; ++i) {
      for (int o = 0; o < d; ++o) {
        const double g = (*pr.dy)[i * d + o];
        gb[o] += g;
        const double* row = pr.W->w.data() + static_cast<std::size_t>(o) * d;
        double* grow = gw.data() + static_cast<std::size_t>(o) * d;
        for (int e = 0; e < d; ++e) {
          grow[e] += g * c.x[i * d + e];
          dtoks[i][e] += g * row[e];
        }
      }
    }
    accum(*pr.W, gw);
    accum(*pr.b, gb);
  }
}

void timestep_embed(int t, int dim, double* out) {
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[2 * i] = std::sin(t * freq);
    out[2 * i + 1] = std::cos(t * freq);
  }
}

// Conditioning vector for one observation, forward only.
void obs_fwd(const PolicyParams& p, const ObservationBundle& obs, ObsCache& c,
             double* cond_out) {
  const auto& cfg = p.cfg;
  const int d = cfg.d_model;
  encoder_fwd(p, "enc_workspace", obs.workspace_img, c.ws);
  state_fwd(p, obs.state_vec, c.state);
  std::copy(c.ws.f.begin(), c.ws.f.end(), cond_out);
  if (cfg.ablation == Ablation::WorkspaceOnly) {
    std::copy(c.state.f.begin(), c.state.f.end(), cond_out + d);
    return;
  }
  std::vector<double> zero(d, 0.0);
  const double* fc = zero.data();
  const double* fp = zero.data();
  if (has_central(cfg)) {
    encoder_fwd(p, "enc_central", obs.central_img, c.central);
    fc = c.central.f.data();
  }
  if (has_peripheral(cfg)) {
    encoder_fwd(p, "enc_peripheral", obs.peripheral_img, c.peripheral);
    fp = c.peripheral.f.data();
  }
  c.fused.assign(d, 0.0);
  if (has_attention(cfg)) {
    attn_fwd(p, fc, fp, c.attn);
    for (int e = 0; e < d; ++e) c.fused[e] = 0.5 * (c.attn.out[e] + c.attn.out[d + e]);
  } else {
    c.fuse_in.resize(2 * d);
    std::copy(fc, fc + d, c.fuse_in.begin());
    std::copy(fp, fp + d, c.fuse_in.begin() + d);
    linear_fwd(need(p, "fuse.w"), need(p, "fuse.b"), c.fuse_in.data(), c.fused.data());
  }
  std::copy(c.fused.begin(), c.fused.end(), cond_out + d);
  std::copy(c.state.f.begin(), c.state.f.end(), cond_out + 2 * d);
}

void obs_bwd(PolicyParams& p, const ObsCache& c, const double* dcond,
             double attn_scale) {
  const auto& cfg = p.cfg;
  const int d = cfg.d_model;
  encoder_bwd(p, "enc_workspace", c.ws, dcond);
  if (cfg.ablation == Ablation::WorkspaceOnly) {
    state_bwd(p, c.state, dcond + d);
    return;
  }
  const double* dfused = dcond + d;
  state_bwd(p, c.state, dcond + 2 * d);
  std::vector<double> dtok0(d), dtok1(d);
  if (has_attention(cfg)) {
    std::vector<double> dout(d);
    for (int e = 0; e < d; ++e) dout[e] = 0.5 * dfused[e];
    attn_bwd(p, c.attn, dout.data(), dout.data(), dtok0.data(), dtok1.data(),
             attn_scale);
  } else {
    std::vector<double> din(2 * d);
    // const_cast-free: linear_bwd needs mutable blocks only
    linear_bwd(need(p, "fuse.w"), need(p, "fuse.b"), c.fuse_in.data(), dfused,
               din.data());
    std::copy(din.begin(), din.begin() + d, dtok0.begin());
    std::copy(din.begin() + d, din.end(), dtok1.begin());
  }
  if (has_central(cfg)) encoder_bwd(p, "enc_central", c.central, dtok0.data());
  if (has_peripheral(cfg)) encoder_bwd(p, "enc_peripheral", c.peripheral, dtok1.data());
}

void denoiser_fwd(const PolicyParams& p, const double* cond, const double* x_t, int t,
                  DenoiserCache& c) {
  const auto& cfg = p.cfg;
  const int zcond = cfg.history * cfg.cond_per_obs();
  const int n = cfg.denoiser_in();
  c.z.resize(n);
  std::copy(cond, cond + zcond, c.z.begin());
  std::copy(x_t, x_t + cfg.chunk_len(), c.z.begin() + zcond);
  timestep_embed(t, cfg.t_embed, c.z.data() + zcond + cfg.chunk_len());
  c.h1pre.resize(cfg.denoiser_hidden);
  c.h1.resize(cfg.denoiser_hidden);
  c.h2pre.resize(cfg.denoiser_hidden);
  c.h2.resize(cfg.denoiser_hidden);
  c.eps.resize(cfg.chunk_len());
  linear_fwd(need(p, "denoiser.fc1.w"), need(p, "denoiser.fc1.b"), c.z.data(),
             c.h1pre.data());
  relu_fwd(c.h1pre.data(), c.h1.data(), cfg.denoiser_hidden, cfg.identity_activations);
  linear_fwd(need(p, "denoiser.fc2.w"), need(p, "denoiser.fc2.b"), c.h1.data(),
             c.h2pre.data());
  relu_fwd(c.h2pre.data(), c.h2.data(), cfg.denoiser_hidden, cfg.identity_activations);
  linear_fwd(need(p, "denoiser.fc3.w"), need(p, "denoiser.fc3.b"), c.h2.data(),
             c.eps.data());
}

// Returns the gradient on the conditioning vector.
void denoiser_bwd(PolicyParams& p, const DenoiserCache& c, const double* deps,
                  double* dcond) {
  const auto& cfg = p.cfg;
  const int zcond = cfg.history * cfg.cond_per_obs();
  std::vector<double> dh2(cfg.denoiser_hidden), dh2pre(cfg.denoiser_hidden);
  std::vector<double> dh1(cfg.denoiser_hidden), dh1pre(cfg.denoiser_hidden);
  std::vector<double> dz(cfg.denoiser_in());
  linear_bwd(need(p, "denoiser.fc3.w"), need(p, "denoiser.fc3.b"), c.h2.data(), deps,
             dh2.data());
  relu_bwd(c.h2pre.data(), dh2.data(), dh2pre.data(), cfg.denoiser_hidden,
           cfg.identity_activations);
  linear_bwd(need(p, "denoiser.fc2.w"), need(p, "denoiser.fc2.b"), c.h1.data(),
             dh2pre.data(), dh1.data());
  relu_bwd(c.h1pre.data(), dh1.data(), dh1pre.data(), cfg.denoiser_hidden,
           cfg.identity_activations);
  linear_bwd(need(p, "denoiser.fc1.w"), need(p, "denoiser.fc1.b"), c.z.data(),
             dh1pre.data(), dz.data());
  std::copy(dz.begin(), dz.begin() + zcond, dcond);
}

// History conditioning: encode each observation, concatenate oldest-first.
void cond_fwd(const PolicyParams& p, const std::vector<const ObservationBundle*>& obs,
              SampleCache& sc, std::vector<double>& cond) {
  const auto& cfg = p.cfg;
  if (obs.empty()) throw ParamError("sample has no observations");
  const int per = cfg.cond_per_obs();
  cond.assign(static_cast<std::size_t>(cfg.history) * per, 0.0);
  sc.obs.assign(cfg.history, {});
  for (int i = 0; i < cfg.history; ++i) {
    // Short histories repeat the oldest entry on the left.
    const int src = std::max(0, static_cast<int>(obs.size()) - cfg.history + i);
    obs_fwd(p, *obs[src], sc.obs[i], cond.data() + static_cast<std::size_t>(i) * per);
  }
}

double sample_loss_fwd(const PolicyParams& p, const Sample& s, int t,
                       const std::vector<double>& noise, const NoiseSchedule& sched,
                       SampleCache& sc) {
  const auto& cfg = p.cfg;
  std::vector<double> cond;
  cond_fwd(p, s.obs, sc, cond);
  std::vector<double> x0(s.chunk, s.chunk + cfg.chunk_len());
  const auto x_t = forward_diffuse(x0, t, noise, sched);
  denoiser_fwd(p, cond.data(), x_t.data(), t, sc.den);
  double loss = 0.0;
  for (int i = 0; i < cfg.chunk_len(); ++i) {
    const double r = sc.den.eps[i] - noise[i];
    loss += r * r;
  }
  return loss / cfg.chunk_len();
}

void sample_loss_bwd(PolicyParams& p, const SampleCache& sc,
                     const std::vector<double>& noise, double weight,
                     double attn_scale) {
  const auto& cfg = p.cfg;
  std::vector<double> deps(cfg.chunk_len());
  for (int i = 0; i < cfg.chunk_len(); ++i)
    deps[i] = weight * 2.0 * (sc.den.eps[i] - noise[i]) / cfg.chunk_len();
  std::vector<double> dcond(static_cast<std::size_t>(cfg.history) * cfg.cond_per_obs());
  denoiser_bwd(p, sc.den, deps.data(), dcond.data());
  const int per = cfg.cond_per_obs();
  for (int i = 0; i < cfg.history; ++i)
    obs_bwd(p, sc.obs[i], dcond.data() + static_cast<std::size_t>(i) * per, attn_scale);
}

void zero_grads(PolicyParams& p) {
  for (auto& b : p.blocks) std::fill(b.g.begin(), b.g.end(), 0.0);
}

void sgd_update(PolicyParams& p, double lr) {
  constexpr double kMomentum = 0.9;
  for (auto& b : p.blocks)
    for (std::size_t i = 0; i < b.w.size(); ++i) {
      b.v[i] = kMomentum * b.v[i] - lr * b.g[i];
      b.w[i] += b.v[i];
    }
}

}  // namespace

// ---- public forward passes ----------------------------------------------

Features encode_observation(const ObservationBundle& obs, const PolicyParams& params) {
  const auto& cfg = params.cfg;
  Features f;
  EncoderCache ec;
  encoder_fwd(params, "enc_workspace", obs.workspace_img, ec);
  f.workspace = ec.f;
  f.central.assign(cfg.d_model, 0.0);
  f.peripheral.assign(cfg.d_model, 0.0);
  if (has_central(cfg)) {
    encoder_fwd(params, "enc_central", obs.central_img, ec);
    f.central = ec.f;
  }
  if (has_peripheral(cfg)) {
    encoder_fwd(params, "enc_peripheral", obs.peripheral_img, ec);
    f.peripheral = ec.f;
  }
  StateCache stc;
  state_fwd(params, obs.state_vec, stc);
  f.state = stc.f;
  return f;
}

AttentionTrace attention_trace(const std::vector<double>& f_central,
                               const std::vector<double>& f_peripheral,
                               const PolicyParams& params) {
  const auto& cfg = params.cfg;
  if (!has_attention(cfg)) throw ParamError("this configuration has no attention block");
  if (static_cast<int>(f_central.size()) != cfg.d_model ||
      static_cast<int>(f_peripheral.size()) != cfg.d_model)
    throw ParamError("attention tokens must be d_model wide");
  AttnCache c;
  attn_fwd(params, f_central.data(), f_peripheral.data(), c);
  AttentionTrace tr;
  tr.tokens_out = c.out;
  tr.weights = c.a;
  return tr;
}

std::vector<double> attention_fuse(const std::vector<double>& f_central,
                                   const std::vector<double>& f_peripheral,
                                   const PolicyParams& params) {
  const auto tr = attention_trace(f_central, f_peripheral, params);
  const int d = params.cfg.d_model;
  std::vector<double> fused(d);
  for (int e = 0; e < d; ++e) fused[e] = 0.5 * (tr.tokens_out[e] + tr.tokens_out[d + e]);
  return fused;
}

// ---- diffusion -----------------------------------------------------------

NoiseSchedule make_cosine_schedule(int T, double s) {
  if (T < 1) throw ParamError("schedule needs T >= 1");
  if (s <= 0.0) throw ParamError("schedule offset must be positive");
  NoiseSchedule sc;
  sc.T = T;
  sc.betas.resize(T);
  sc.alphas.resize(T);
  sc.alphas_bar.resize(T);
  auto f = [&](double u) {
    const double v = std::cos(((u / T + s) / (1.0 + s)) * kPi / 2.0);
    return v * v;
  };
  const double f0 = f(0.0);
  double abar = 1.0;
  for (int t = 0; t < T; ++t) {
    const double beta = std::clamp(1.0 - f(t + 1.0) / f(static_cast<double>(t)), 1e-8, 0.999);
    sc.betas[t] = beta;
    sc.alphas[t] = 1.0 - beta;
    abar *= sc.alphas[t];
    sc.alphas_bar[t] = abar;
  }
  (void)f0;
  return sc;
}

std::vector<double> forward_diffuse(const std::vector<double>& chunk, int t,
                                    const std::vector<double>& noise,
                                    const NoiseSchedule& schedule) {
  if (t < 0 || t >= schedule.T) throw ParamError("diffusion timestep out of range");
  if (noise.size() != chunk.size()) throw ParamError("noise shape mismatch");
  const double ab = schedule.alphas_bar[t];
  const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
  std::vector<double> out(chunk.size());
  for (std::size_t i = 0; i < chunk.size(); ++i) out[i] = sa * chunk[i] + sn * noise[i];
  return out;
}

double train_step_fixed(PolicyParams& params, const std::vector<Sample>& batch,
                        const std::vector<int>& ts,
                        const std::vector<std::vector<double>>& noises,
                        const NoiseSchedule& schedule, double lr) {
  if (batch.empty()) throw ParamError("empty batch");
  if (ts.size() != batch.size() || noises.size() != batch.size())
    throw ParamError("per-item timestep/noise counts must match the batch");
  zero_grads(params);
  double loss = 0.0;
  const double weight = 1.0 / batch.size();
  SampleCache sc;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    loss += weight * sample_loss_fwd(params, batch[i], ts[i], noises[i], schedule, sc);
    sample_loss_bwd(params, sc, noises[i], weight, 1.0);
  }
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "training loss diverged (" << loss << ") with lr " << lr << " over "
        << batch.size() << " items";
    throw DivergenceError(msg.str());
  }
  sgd_update(params, lr);
  return loss;
}

double train_step(PolicyParams& params, const std::vector<Sample>& batch,
                  const NoiseSchedule& schedule, double lr, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tdist(0, schedule.T - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<int> ts(batch.size());
  std::vector<std::vector<double>> noises(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ts[i] = tdist(rng);
    noises[i].resize(params.cfg.chunk_len());
    for (double& n : noises[i]) n = normal(rng);
  }
  return train_step_fixed(params, batch, ts, noises, schedule, lr);
}

ActionChunk sample_chunk(const PolicyParams& params,
                         const std::vector<ObservationBundle>& history,
                         const NoiseSchedule& schedule, std::uint64_t seed) {
  const auto& cfg = params.cfg;
  if (history.empty()) throw ParamError("sample_chunk needs at least one observation");
  std::vector<const ObservationBundle*> obs;
  obs.reserve(history.size());
  for (const auto& h : history) obs.push_back(&h);

  SampleCache sc;
  std::vector<double> cond;
  cond_fwd(params, obs, sc, cond);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int n = cfg.chunk_len();
  std::vector<double> x(n);
  for (double& v : x) v = normal(rng);

  // Ancestral DDPM with the predicted x0 clipped to the action box, which
  // keeps untrained parameter sets from overflowing across reverse steps.
  for (int t = schedule.T - 1; t >= 0; --t) {
    denoiser_fwd(params, cond.data(), x.data(), t, sc.den);
    const double ab = schedule.alphas_bar[t];
    const double ab_prev = t > 0 ? schedule.alphas_bar[t - 1] : 1.0;
    const double beta = schedule.betas[t];
    const double alpha = schedule.alphas[t];
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double c1 = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta);
    for (int i = 0; i < n; ++i) {
      double x0 = (x[i] - std::sqrt(1.0 - ab) * sc.den.eps[i]) / std::sqrt(ab);
      x0 = std::clamp(x0, -1.0, 1.0);
      x[i] = c0 * x0 + c1 * x[i];
      if (t > 0) x[i] += sigma * normal(rng);
    }
  }

  ActionChunk chunk;
  chunk.history = cfg.history;
  chunk.horizon = cfg.horizon;
  chunk.actions.resize(n);
  for (int i = 0; i < n; ++i)
    chunk.actions[i] = i % 6 < 4 ? std::clamp(x[i], -1.0, 1.0) : std::clamp(x[i], 0.0, 1.0);
  return chunk;
}

GradCheckReport grad_check(PolicyParams& params, const std::vector<Sample>& batch,
                           const NoiseSchedule& schedule,
                           double attention_backward_scale, double fd_step) {
  if (batch.empty()) throw ParamError("empty batch");
  // Fixed noising so the loss is a pure function of the parameters.
  std::mt19937_64 rng(0x5eed5eedULL);
  std::uniform_int_distribution<int> tdist(0, schedule.T - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<int> ts(batch.size());
  std::vector<std::vector<double>> noises(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ts[i] = tdist(rng);
    noises[i].resize(params.cfg.chunk_len());
    for (double& v : noises[i]) v = normal(rng);
  }

  auto loss_at = [&]() {
    SampleCache sc;
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i)
      loss += sample_loss_fwd(params, batch[i], ts[i], noises[i], schedule, sc) /
              batch.size();
    return loss;
  };

  zero_grads(params);
  {
    SampleCache sc;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      sample_loss_fwd(params, batch[i], ts[i], noises[i], schedule, sc);
      sample_loss_bwd(params, sc, noises[i], 1.0 / batch.size(),
                      attention_backward_scale);
    }
  }

  const double h = fd_step;
  GradCheckReport report;
  for (auto& b : params.blocks) {
    double block_worst = 0.0;
    for (std::size_t i = 0; i < b.w.size(); ++i) {
      const double saved = b.w[i];
      b.w[i] = saved + h;
      const double lp = loss_at();
      b.w[i] = saved - h;
      const double lm = loss_at();
      b.w[i] = saved;
      const double numeric = (lp - lm) / (2.0 * h);
      const double analytic = b.g[i];
      const double rel = std::abs(analytic - numeric) /
                         std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
      if (rel > block_worst) block_worst = rel;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = b.name;
      }
    }
    report.per_block[b.name] = block_worst;
  }
  return report;
}

// ---- parameter IO --------------------------------------------------------

namespace {

nlohmann::json config_to_json(const PolicyConfig& cfg) {
  return {{"d_model", cfg.d_model},
          {"heads", cfg.heads},
          {"history", cfg.history},
          {"horizon", cfg.horizon},
          {"img_px", cfg.img_px},
          {"conv_ch", cfg.conv_ch},
          {"denoiser_hidden", cfg.denoiser_hidden},
          {"t_embed", cfg.t_embed},
          {"ablation", to_string(cfg.ablation)},
          {"identity_activations", cfg.identity_activations}};
}

PolicyConfig config_from_json(const nlohmann::json& j) {
  PolicyConfig cfg;
  cfg.d_model = j.at("d_model").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.history = j.at("history").get<int>();
  cfg.horizon = j.at("horizon").get<int>();
  cfg.img_px = j.at("img_px").get<int>();
  cfg.conv_ch = j.at("conv_ch").get<std::array<int, 3>>();
  cfg.denoiser_hidden = j.at("denoiser_hidden").get<int>();
  cfg.t_embed = j.at("t_embed").get<int>();
  cfg.ablation = ablation_from_string(j.at("ablation").get<std::string>());
  cfg.identity_activations = j.at("identity_activations").get<bool>();
  return cfg;
}

}  // namespace

void save_params(const PolicyParams& params, const std::string& path_prefix) {
  static_assert(std::endian::native == std::endian::little,
                "parameter files are little-endian");
  nlohmann::json sidecar;
  sidecar["format"] = "flexicup-policy-params";
  sidecar["dtype"] = "float64-le";
  sidecar["config"] = config_to_json(params.cfg);
  std::uint64_t offset = 0;
  auto& layers = sidecar["layers"] = nlohmann::json::array();
  for (const auto& b : params.blocks) {
    layers.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", offset},
                      {"count", b.size()}});
    offset += b.size();
  }

  std::ofstream bin(path_prefix + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot write " + path_prefix + ".bin");
  for (const auto& b : params.blocks)
    bin.write(reinterpret_cast<const char*>(b.w.data()),
              static_cast<std::streamsize>(b.w.size() * sizeof(double)));
  if (!bin) throw IoError("failed writing " + path_prefix + ".bin");

  std::ofstream js(path_prefix + ".json");
  if (!js) throw IoError("cannot write " + path_prefix + ".json");
  js << sidecar.dump(2) << '\n';
  if (!js) throw IoError("failed writing " + path_prefix + ".json");
}

PolicyParams load_params(const std::string& path_prefix) {
  std::ifstream js(path_prefix + ".json");
  if (!js) throw IoError("cannot read " + path_prefix + ".json");
  nlohmann::json sidecar;
  try {
    js >> sidecar;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad parameter sidecar: ") + e.what());
  }
  PolicyParams params;
  try {
    if (sidecar.at("format").get<std::string>() != "flexicup-policy-params")
      throw IoError("not a policy parameter file");
    params = PolicyParams::init(config_from_json(sidecar.at("config")), 0);
    const auto& layers = sidecar.at("layers");
    if (layers.size() != params.blocks.size())
      throw IoError("layer table does not match the configuration");
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
      if (layers[i].at("name").get<std::string>() != params.blocks[i].name ||
          layers[i].at("count").get<std::uint64_t>() != params.blocks[i].size())
        throw IoError("layer table does not match the configuration");
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad parameter sidecar: ") + e.what());
  }

  std::ifstream bin(path_prefix + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot read " + path_prefix + ".bin");
  for (auto& b : params.blocks) {
    bin.read(reinterpret_cast<char*>(b.w.data()),
             static_cast<std::streamsize>(b.w.size() * sizeof(double)));
    if (!bin) throw IoError("parameter file truncated: " + path_prefix + ".bin");
    std::fill(b.g.begin(), b.g.end(), 0.0);
    std::fill(b.v.begin(), b.v.end(), 0.0);
  }
  bin.peek();
  if (!bin.eof()) throw IoError("parameter file has trailing bytes: " + path_prefix + ".bin");
  return params;
}

// ---- observations --------------------------------------------------------

std::vector<double> render_workspace(const scene::Scene& scene, int img_px) {
  if (img_px < 1) throw ParamError("img_px must be positive");
  const sensor::RenderParams pal;
  std::vector<double> img(static_cast<std::size_t>(img_px) * img_px);
  const double mr2 = pal.marker_radius_cm * pal.marker_radius_cm;
  for (int iy = 0; iy < img_px; ++iy) {
    const double y = (iy + 0.5) / img_px * scene.height_cm;
    for (int ix = 0; ix < img_px; ++ix) {
      const double x = (ix + 0.5) / img_px * scene.width_cm;
      double value = pal.clear_value;
      const double dx = x - scene.target_x_cm, dy = y - scene.target_y_cm;
      if (dx * dx + dy * dy <= mr2) {
        value = pal.marker_value;
      } else {
        const int idx = scene.cell_index(x, y);
        if (idx >= 0 && scene.cell_is_obstacle(idx)) value = pal.obstacle_value;
      }
      img[static_cast<std::size_t>(iy) * img_px + ix] = value / 255.0;
    }
  }
  return img;
}

namespace {

double bilinear(const sensor::Frame& f, double x, double y) {
  const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, f.width_px - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, f.height_px - 1);
  const int x1 = std::min(x0 + 1, f.width_px - 1);
  const int y1 = std::min(y0 + 1, f.height_px - 1);
  const double fx = std::clamp(x - x0, 0.0, 1.0), fy = std::clamp(y - y0, 0.0, 1.0);
  const double v00 = f.at(x0, y0), v10 = f.at(x1, y0);
  const double v01 = f.at(x0, y1), v11 = f.at(x1, y1);
  return (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy;
}

}  // namespace

ObservationBundle bundle_observation(const std::vector<double>& workspace_img,
                                     const sensor::Frame& frame,
                                     const std::array<double, 8>& state_vec,
                                     int img_px) {
  ObservationBundle obs;
  obs.workspace_img = workspace_img;
  obs.state_vec = state_vec;
  const auto& z = frame.zones;
  const double cx = z.center_x_px, cy = z.center_y_px;
  const double rc = z.central_radius_px, ro = z.peripheral_outer_px;

  obs.central_img.assign(static_cast<std::size_t>(img_px) * img_px, 0.0);
  const double half = img_px / 2.0;
  for (int iy = 0; iy < img_px; ++iy)
    for (int ix = 0; ix < img_px; ++ix) {
      const double u = (ix + 0.5 - half) / half;  // [-1, 1] across the disk
      const double v = (iy + 0.5 - half) / half;
      if (u * u + v * v > 1.0) continue;
      obs.central_img[static_cast<std::size_t>(iy) * img_px + ix] =
          bilinear(frame, cx + u * rc, cy + v * rc) / 255.0;
    }

  // Rows sweep radius (central rim outward), columns sweep azimuth.
  obs.peripheral_img.assign(static_cast<std::size_t>(img_px) * img_px, 0.0);
  for (int iy = 0; iy < img_px; ++iy) {
    const double r = rc + (iy + 0.5) / img_px * (ro - rc);
    for (int ix = 0; ix < img_px; ++ix) {
      const double phi = (ix + 0.5) / img_px * 2.0 * kPi;
      obs.peripheral_img[static_cast<std::size_t>(iy) * img_px + ix] =
          bilinear(frame, cx + r * std::cos(phi), cy + r * std::sin(phi)) / 255.0;
    }
  }
  return obs;
}

// ---- demonstrations ------------------------------------------------------

scene::Scene demo_scene(const DemoSpec& spec, int index) {
  if (spec.count < 1) throw ParamError("demo spec needs a positive count");
  std::mt19937_64 rng(spec.seed ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
  auto s = scene::generate_board(spec.coverage, spec.width_cm, spec.height_cm,
                                 spec.seed + static_cast<std::uint64_t>(index));
  const double cell = s.cell_cm;
  auto center_snap = [&](double v) { return (std::floor(v / cell) + 0.5) * cell; };
  const int jx = static_cast<int>(rng() % 5) - 2;
  const int jy = static_cast<int>(rng() % 5) - 2;
  s.target_x_cm = center_snap(spec.width_cm / 2.0) + jx * cell;
  s.target_y_cm = center_snap(spec.height_cm / 2.0) + jy * cell;
  s.incline_deg = spec.incline_min_deg +
                  (spec.incline_max_deg - spec.incline_min_deg) * ((rng() % 1001) / 1000.0);

  // Clear the grasp vicinity so the marker cell is feasible with margin.
  for (int iy = 0; iy < s.ny(); ++iy)
    for (int ix = 0; ix < s.nx(); ++ix) {
      const double px = std::clamp(s.target_x_cm, ix * cell, (ix + 1) * cell);
      const double py = std::clamp(s.target_y_cm, iy * cell, (iy + 1) * cell);
      const double dx = s.target_x_cm - px, dy = s.target_y_cm - py;
      if (dx * dx + dy * dy < spec.clear_radius_cm * spec.clear_radius_cm)
        s.heights_mm[static_cast<std::size_t>(iy) * s.nx() + ix] = 0.0;
    }
  s.validate();
  return s;
}

std::vector<DemoEpisode> collect_demos(const DemoSpec& spec,
                                       const scene::CupFootprint& cup,
                                       const controller::Params& cparams) {
  std::vector<DemoEpisode> demos;
  int index = 0;
  int failures = 0;
  while (static_cast<int>(demos.size()) < spec.count) {
    if (index >= spec.count * 3) {
      std::ostringstream msg;
      msg << "demo collection fell short: " << demos.size() << " of " << spec.count
          << " after " << index << " attempts";
      throw SessionError(msg.str());
    }
    auto s = demo_scene(spec, index++);
    device::EmulatorServer server(s, cup.config_id);
    server.listen("127.0.0.1:0");
    std::thread th([&] { server.serve_one(); });
    auto result = controller::run_episode(server.endpoint(), s, cup, cparams);
    server.stop();
    th.join();
    if (!result.success) {
      ++failures;
      continue;
    }
    // Wall-clock timestamps differ across reruns; demo files promise
    // byte-identical seeded collection, so store the step index instead.
    for (std::size_t i = 0; i < result.trajectory.size(); ++i)
      result.trajectory[i].timestamp_us = i;
    demos.push_back({std::move(s), std::move(result.trajectory)});
  }
  (void)failures;
  return demos;
}

void save_demos(const std::string& dir, const std::vector<DemoEpisode>& demos) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  for (std::size_t i = 0; i < demos.size(); ++i) {
    std::ostringstream stem;
    stem << dir << "/demo_" << std::setw(3) << std::setfill('0') << i;
    scene::save_scene(demos[i].scene, stem.str() + ".scene.json");
    controller::save_trajectory(demos[i].records, stem.str() + ".traj.jsonl");
  }
}

std::vector<DemoEpisode> load_demos(const std::string& dir) {
  std::vector<DemoEpisode> demos;
  for (std::size_t i = 0;; ++i) {
    std::ostringstream stem;
    stem << dir << "/demo_" << std::setw(3) << std::setfill('0') << i;
    const auto scene_path = stem.str() + ".scene.json";
    if (!std::filesystem::exists(scene_path)) break;
    DemoEpisode ep;
    ep.scene = scene::load_scene(scene_path);
    ep.records = controller::load_trajectory(stem.str() + ".traj.jsonl");
    demos.push_back(std::move(ep));
  }
  if (demos.empty()) throw IoError("no demonstrations under " + dir);
  return demos;
}

namespace {

struct DenseStep {
  std::array<double, 8> state{};
  std::array<double, 6> action{};
};

// Unit-clamped replay: moves longer than 1 cm/deg become runs of equal
// sub-steps so every action respects the chunk clamp.
std::vector<DenseStep> densify(const std::vector<controller::TrajectoryRecord>& records) {
  std::vector<DenseStep> dense;
  for (const auto& rec : records) {
    double maxd = 0.0;
    for (int i = 0; i < 4; ++i) maxd = std::max(maxd, std::abs(rec.action[i]));
    const int n = std::max(1, static_cast<int>(std::ceil(maxd - 1e-9)));
    for (int k = 0; k < n; ++k) {
      DenseStep step;
      step.state = rec.state;
      for (int i = 0; i < 4; ++i) {
        step.state[i] = rec.state[i] + rec.action[i] * k / n;
        step.action[i] = rec.action[i] / n;
      }
      step.action[4] = rec.action[4];
      step.action[5] = rec.action[5];
      dense.push_back(step);
    }
  }
  return dense;
}

}  // namespace

Sample Dataset::sample(std::size_t i) const {
  Sample s;
  for (int idx : windows[i]) s.obs.push_back(&bundles[idx]);
  s.chunk = chunks[i].data();
  return s;
}

Dataset build_dataset(const std::vector<DemoEpisode>& demos, const PolicyConfig& cfg,
                      const scene::CupFootprint& cup) {
  cfg.validate();
  Dataset data;
  data.history = cfg.history;
  data.horizon = cfg.horizon;
  const auto intr = sensor::CameraIntrinsics{}.downscaled(4);
  const auto config = physics::make_config(cup);

  for (const auto& demo : demos) {
    const auto ws = render_workspace(demo.scene, cfg.img_px);
    const auto dense = densify(demo.records);
    if (dense.empty()) continue;
    const int base = static_cast<int>(data.bundles.size());
    for (const auto& step : dense) {
      scene::Pose pose{step.state[0], step.state[1], step.state[2], step.state[3]};
      const bool led = step.state[4] >= 0.5;
      const auto frame = sensor::render_frame(demo.scene, pose, led, intr, config);
      data.bundles.push_back(bundle_observation(ws, frame, step.state, cfg.img_px));
    }
    const int len = static_cast<int>(dense.size());
    for (int k = 0; k < len; ++k) {
      std::vector<int> window(cfg.history);
      for (int i = 0; i < cfg.history; ++i)
        window[i] = base + std::max(0, k - cfg.history + 1 + i);
      std::vector<double> chunk(static_cast<std::size_t>(cfg.chunk_len()), 0.0);
      for (int m = 0; m < cfg.horizon; ++m) {
        const int src = k + m;
        double* row = chunk.data() + static_cast<std::size_t>(m) * 6;
        if (src < len) {
          std::copy(dense[src].action.begin(), dense[src].action.end(), row);
        } else {
          // Terminal hold: zero motion with the final i/u levels.
          row[4] = dense[len - 1].action[4];
          row[5] = dense[len - 1].action[5];
        }
      }
      data.windows.push_back(std::move(window));
      data.chunks.push_back(std::move(chunk));
    }
  }
  return data;
}

// ---- training ------------------------------------------------------------

TrainReport train_policy(PolicyParams& params, const Dataset& data,
                         const NoiseSchedule& schedule, const TrainOpts& opts) {
  if (data.size() == 0) throw ParamError("empty dataset");
  if (opts.batch < 1 || opts.epochs < 1) throw ParamError("bad training options");
  TrainReport report;
  std::mt19937_64 rng(opts.seed);
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int steps = 0;
    for (std::size_t at = 0; at < order.size(); at += opts.batch) {
      std::vector<Sample> batch;
      const std::size_t end = std::min(order.size(), at + opts.batch);
      for (std::size_t i = at; i < end; ++i) batch.push_back(data.sample(order[i]));
      epoch_loss += train_step(params, batch, schedule, opts.lr, rng);
      ++steps;
    }
    epoch_loss /= std::max(1, steps);
    if (epoch == 0) report.initial_loss = epoch_loss;
    report.epoch_loss.push_back(epoch_loss);
  }
  report.final_loss = report.epoch_loss.back();
  return report;
}

// ---- evaluation ----------------------------------------------------------

RolloutResult policy_rollout(const scene::Scene& scene, const PolicyParams& params,
                             const NoiseSchedule& schedule,
                             const scene::CupFootprint& cup, std::uint64_t seed,
                             int max_actions) {
  const auto& cfg = params.cfg;
  RolloutResult result;
  device::EmulatorCore core(scene, cup.config_id);
  wire::CamPayload cam;
  cam.exposure_gain = 1.0;
  cam.rate_hz = 240.0;
  cam.downscale = 4;
  core.set_cam(cam);

  const auto ws = render_workspace(scene, cfg.img_px);
  std::vector<ObservationBundle> history;
  bool was_attached = false;
  std::uint64_t chunk_seed = seed;
  const int per_chunk = std::max(1, cfg.horizon / 2);

  int executed = 0;
  while (executed < max_actions) {
    const auto frame = core.capture_frame();
    history.push_back(bundle_observation(ws, frame, core.state().vector(), cfg.img_px));
    if (static_cast<int>(history.size()) > cfg.history)
      history.erase(history.begin());
    const auto chunk = sample_chunk(params, history, schedule, chunk_seed++);

    for (int m = 0; m < per_chunk && executed < max_actions; ++m, ++executed) {
      const double* a = chunk.row(m);
      const auto& st = core.state();
      const bool attached_before = st.attached;
      was_attached = was_attached || attached_before;

      const bool led = a[4] >= 0.5;
      if (led != st.led_on) core.set_led(led);
      const bool valve = a[5] >= 0.5;
      if (valve != st.valve_open) {
        if (!valve && attached_before) {
          // Release: success only at the placement corner.
          const bool at_place = std::abs(st.x_cm - 4.0) <= 2.0 &&
                                std::abs(st.y_cm - 4.0) <= 2.0;
          core.set_valve(false);
          if (at_place) {
            result.success = true;
            result.actions_executed = executed + 1;
            return result;
          }
          result.note = "released away from the placement target";
        } else {
          core.set_valve(valve);
        }
      }

      double d[4];
      for (int i = 0; i < 4; ++i) d[i] = std::clamp(a[i], -1.0, 1.0);
      if (std::abs(d[0]) + std::abs(d[1]) + std::abs(d[2]) + std::abs(d[3]) > 1e-6) {
        wire::MovePayload mv;
        mv.x_cm = std::clamp(core.state().x_cm + d[0], 0.2, scene.width_cm - 0.2);
        mv.y_cm = std::clamp(core.state().y_cm + d[1], 0.2, scene.height_cm - 0.2);
        mv.z_cm = core.state().z_cm + d[2];
        mv.tilt_deg = core.state().tilt_deg + d[3];
        core.move_to(mv);
      }
      core.tick_us(core.frame_period_us());
    }
  }
  result.actions_executed = executed;
  if (result.note.empty())
    result.note = was_attached ? "never released at the target" : "never attached";
  return result;
}

}  // namespace flexicup::policy
