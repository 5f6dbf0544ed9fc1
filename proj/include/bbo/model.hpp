// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "bbo/error.hpp"
#include "bbo/rng.hpp"

namespace bbo {

/// Decoder-only transformer shape. Attention uses rotary position embeddings,
/// grouped key/value heads and RMS-normalized per-head queries and keys; the
/// feed-forward block is gated SiLU. No biases; embeddings are untied.
struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int n_kv_groups = 2;
  int model_dim = 64;
  int head_dim = 32;
  int ffn_dim = 192;
  int vocab_size = 512;
  int context_length = 512;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  void validate() const {
    auto positive = [](int v, const char* what) {
      if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(n_kv_groups, "n_kv_groups");
    positive(model_dim, "model_dim");
    positive(head_dim, "head_dim");
    positive(ffn_dim, "ffn_dim");
    positive(vocab_size, "vocab_size");
    positive(context_length, "context_length");
    if (n_heads % n_kv_groups != 0) {
      throw ConfigError("n_heads must be divisible by n_kv_groups");
    }
    if (head_dim % 2 != 0) throw ConfigError("head_dim must be even");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},       {"n_heads", c.n_heads},
          {"n_kv_groups", c.n_kv_groups}, {"model_dim", c.model_dim},
          {"head_dim", c.head_dim},       {"ffn_dim", c.ffn_dim},
          {"vocab_size", c.vocab_size},   {"context_length", c.context_length},
          {"rope_base", c.rope_base},     {"norm_eps", c.norm_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_kv_groups = j.at("n_kv_groups").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.context_length = j.at("context_length").get<int>();
  c.rope_base = j.value("rope_base", 10000.0);
  c.norm_eps = j.value("norm_eps", 1e-6);
  c.validate();
  return c;
}

struct TensorInfo {
  std::string name;
  int rows;
  int cols;  // 1 for vectors
  std::size_t offset;
  std::size_t size() const {
    return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }
  bool is_matrix() const { return cols > 1; }
};

/// Named tensors in storage order:
///   tok_embedding [V, d]
///   per layer l, prefix "layers.l.":
///     attn_norm [d], wq [d, H*hd], wk [d, G*hd], wv [d, G*hd],
///     q_norm [hd], k_norm [hd], wo [H*hd, d],
///     mlp_norm [d], w_gate [d, f], w_up [d, f], w_down [f, d]
///   final_norm [d], lm_head [d, V]
/// Matrices are row-major and multiply activations from the right.
class ParamLayout {
 public:
  struct Layer {
    std::size_t attn_norm, wq, wk, wv, q_norm, k_norm, wo, mlp_norm, w_gate,
        w_up, w_down;
  };

  explicit ParamLayout(const ModelConfig& c) {
    c.validate();
    const int d = c.model_dim, hd = c.head_dim, H = c.n_heads,
              G = c.n_kv_groups, f = c.ffn_dim, V = c.vocab_size;
    embedding = add("tok_embedding", V, d);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Layer L{};
      L.attn_norm = add(p + "attn_norm", d, 1);
      L.wq = add(p + "wq", d, H * hd);
      L.wk = add(p + "wk", d, G * hd);
      L.wv = add(p + "wv", d, G * hd);
      L.q_norm = add(p + "q_norm", hd, 1);
      L.k_norm = add(p + "k_norm", hd, 1);
      L.wo = add(p + "wo", H * hd, d);
      L.mlp_norm = add(p + "mlp_norm", d, 1);
      L.w_gate = add(p + "w_gate", d, f);
      L.w_up = add(p + "w_up", d, f);
      L.w_down = add(p + "w_down", f, d);
      layers.push_back(L);
    }
    final_norm = add("final_norm", d, 1);
    lm_head = add("lm_head", d, V);
  }

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::size_t total() const { return total_; }

  /// Parameters excluding the input embedding and output head.
  std::size_t non_embedding() const {
    return total_ - tensors_[embedding].size() - tensors_[lm_head].size();
  }

  std::size_t embedding = 0, final_norm = 0, lm_head = 0;
  std::vector<Layer> layers;

 private:
  std::size_t add(std::string name, int rows, int cols) {
    tensors_.push_back({std::move(name), rows, cols, total_});
    total_ += tensors_.back().size();
    return tensors_.size() - 1;
  }

  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

inline std::size_t parameter_count(const ModelConfig& c) {
  return ParamLayout(c).total();
}

inline const std::vector<std::string>& architecture_labels() {
  static const std::vector<std::string> labels = {"2M", "5M", "13M", "30M",
                                                  "80M"};
  return labels;
}

/// Rows of the architecture grid, keyed by nominal non-embedding size.
inline ModelConfig architecture_preset(const std::string& label,
                                       int vocab_size, int context_length) {
  struct Row {
    const char* label;
    int L, H, G, d, hd, f;
  };
  static const Row rows[] = {{"2M", 7, 8, 4, 128, 64, 384},
                             {"5M", 14, 8, 4, 128, 64, 384},
                             {"13M", 14, 16, 8, 128, 128, 384},
                             {"30M", 14, 16, 8, 256, 128, 768},
                             {"80M", 14, 16, 8, 512, 128, 1536}};
  for (const auto& r : rows) {
    if (label != r.label) continue;
    ModelConfig c;
    c.n_layers = r.L;
    c.n_heads = r.H;
    c.n_kv_groups = r.G;
    c.model_dim = r.d;
    c.head_dim = r.hd;
    c.ffn_dim = r.f;
    c.vocab_size = vocab_size;
    c.context_length = context_length;
    c.validate();
    return c;
  }
  throw ConfigError("unknown architecture '" + label +
                    "'; expected one of 2M, 5M, 13M, 30M, 80M");
}

template <class T>
using RowMajorMatrix =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

// Row-wise RMS normalisation of `width`-wide segments starting at `col`:
// y = x / sqrt(mean(x^2) + eps) * w. Stores the reciprocal RMS per row.
template <class T>
void rmsnorm_forward(const RowMajorMatrix<T>& x, RowMajorMatrix<T>& y,
                     Eigen::Index col, Eigen::Index width, const T* w,
                     T eps, T* inv_rms, Eigen::Index inv_stride) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T* xr = x.data() + i * x.cols() + col;
    T* yr = y.data() + i * y.cols() + col;
    T ss = 0;
    for (Eigen::Index k = 0; k < width; ++k) ss += xr[k] * xr[k];
    const T r = T(1) / std::sqrt(ss / T(width) + eps);
    if (inv_rms) inv_rms[i * inv_stride] = r;
    for (Eigen::Index k = 0; k < width; ++k) yr[k] = xr[k] * r * w[k];
  }
}

// Backward of rmsnorm_forward. Accumulates into dx and dw.
template <class T>
void rmsnorm_backward(const RowMajorMatrix<T>& x, const RowMajorMatrix<T>& dy,
                      RowMajorMatrix<T>& dx, Eigen::Index col,
                      Eigen::Index width, const T* w, const T* inv_rms,
                      Eigen::Index inv_stride, T* dw) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T* xr = x.data() + i * x.cols() + col;
    const T* gr = dy.data() + i * dy.cols() + col;
    T* dxr = dx.data() + i * dx.cols() + col;
    const T r = inv_rms[i * inv_stride];
    T dot = 0;
    for (Eigen::Index k = 0; k < width; ++k) {
      dw[k] += gr[k] * xr[k] * r;
      dot += xr[k] * gr[k] * w[k];
    }
    const T c = r * r * r * dot / T(width);
    for (Eigen::Index k = 0; k < width; ++k) {
      dxr[k] += r * gr[k] * w[k] - c * xr[k];
    }
  }
}

}  // namespace detail

/// Parameters plus forward/backward passes. T is float for training and
/// inference, double for gradient checking.
template <class T>
class Transformer {
 public:
  using Mat = RowMajorMatrix<T>;
  using MatMap = Eigen::Map<Mat>;
  using CMatMap = Eigen::Map<const Mat>;

  explicit Transformer(ModelConfig cfg)
      : cfg_(cfg), layout_(cfg_), params_(layout_.total(), T(0)) {
    build_rope();
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }

  /// Truncated normal (std 0.02, cut at two std) for matrices, ones for norm
  /// weights.
  void init(std::uint64_t seed) {
    Rng rng(seed);
    for (const auto& t : layout_.tensors()) {
      T* p = params_.data() + t.offset;
      if (t.cols == 1) {
        std::fill(p, p + t.size(), T(1));
        continue;
      }
      for (std::size_t i = 0; i < t.size(); ++i) {
        double z;
        do {
          z = rng.normal();
        } while (std::abs(z) > 2.0);
        p[i] = static_cast<T>(0.02 * z);
      }
    }
  }

  CMatMap tensor(std::size_t id) const {
    const auto& t = layout_.tensors()[id];
    return CMatMap(params_.data() + t.offset, t.rows, t.cols);
  }
  const T* ptr(std::size_t id) const {
    return params_.data() + layout_.tensors()[id].offset;
  }

  /// Logits for every position of `tokens` (sequence x vocab).
  Mat forward(std::span<const int> tokens) const {
    check_tokens(tokens);
    Activations act;
    run_forward(tokens, act);
    return std::move(act.logits);
  }

  /// Summed next-token negative log-likelihood over positions whose target is
  /// non-negative. When `grad` is given, adds scale * d(sum)/d(params) into it.
  /// Returns {sum, count}.
  std::pair<double, std::size_t> loss_and_grad(std::span<const int> inputs,
                                               std::span<const int> targets,
                                               std::vector<T>* grad,
                                               T scale = T(1)) const {
    check_tokens(inputs);
    if (targets.size() != inputs.size()) {
      throw DomainError("targets must align with inputs");
    }
    Activations act;
    run_forward(inputs, act);
    const Eigen::Index n = act.logits.rows();
    const Eigen::Index V = act.logits.cols();
    double sum = 0.0;
    std::size_t count = 0;
    Mat dlogits;
    if (grad) dlogits = Mat::Zero(n, V);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int tgt = targets[static_cast<std::size_t>(i)];
      if (tgt < 0) continue;
      if (tgt >= V) throw DomainError("target id outside vocabulary");
      const T* row = act.logits.data() + i * V;
      T mx = row[0];
      for (Eigen::Index k = 1; k < V; ++k) mx = std::max(mx, row[k]);
      T z = 0;
      for (Eigen::Index k = 0; k < V; ++k) z += std::exp(row[k] - mx);
      const T logz = mx + std::log(z);
      sum += static_cast<double>(logz - row[tgt]);
      ++count;
      if (grad) {
        T* d = dlogits.data() + i * V;
        for (Eigen::Index k = 0; k < V; ++k) {
          d[k] = scale * std::exp(row[k] - logz);
        }
        d[tgt] -= scale;
      }
    }
    if (grad) {
      if (grad->size() != params_.size()) grad->assign(params_.size(), T(0));
      run_backward(inputs, act, dlogits, *grad);
    }
    return {sum, count};
  }

  // RoPE tables, [position][pair]
  const std::vector<T>& rope_cos() const { return cos_; }
  const std::vector<T>& rope_sin() const { return sin_; }

  void check_tokens(std::span<const int> tokens) const {
    if (tokens.empty()) throw DomainError("empty token sequence");
    if (tokens.size() > static_cast<std::size_t>(cfg_.context_length)) {
      throw DomainError("sequence of " + std::to_string(tokens.size()) +
                        " tokens exceeds context length " +
                        std::to_string(cfg_.context_length));
    }
    for (int t : tokens) {
      if (t < 0 || t >= cfg_.vocab_size) {
        throw DomainError("token id " + std::to_string(t) +
                          " outside vocabulary");
      }
    }
  }

  /// Rotates `width`-wide head segments of rows [0, x.rows()) placed at
  /// positions first_pos + i. `inverse` applies the transpose rotation.
  void apply_rope(Mat& x, int n_heads, int first_pos, bool inverse) const {
    const int hd = cfg_.head_dim, half = hd / 2;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const std::size_t pos = static_cast<std::size_t>(first_pos + i);
      const T* c = cos_.data() + pos * static_cast<std::size_t>(half);
      const T* s = sin_.data() + pos * static_cast<std::size_t>(half);
      T* row = x.data() + i * x.cols();
      for (int h = 0; h < n_heads; ++h) {
        T* v = row + h * hd;
        for (int j = 0; j < half; ++j) {
          const T a = v[j], b = v[j + half];
          const T sn = inverse ? -s[j] : s[j];
          v[j] = a * c[j] - b * sn;
          v[j + half] = a * sn + b * c[j];
        }
      }
    }
  }

 private:
  struct LayerActivations {
    Mat x_in, h1, q_raw, k_raw, q, k, v, att, x_mid, h2, a, b, m;
    std::vector<T> r1, r2, rq, rk;
    std::vector<Mat> probs;  // per query head
  };
  struct Activations {
    std::vector<LayerActivations> layers;
    Mat x_final, hf, logits;
    std::vector<T> rf;
  };

  void build_rope() {
    const int half = cfg_.head_dim / 2;
    cos_.resize(static_cast<std::size_t>(cfg_.context_length) * half);
    sin_.resize(cos_.size());
    for (int p = 0; p < cfg_.context_length; ++p) {
      for (int j = 0; j < half; ++j) {
        const double freq =
            std::pow(cfg_.rope_base, -2.0 * j / static_cast<double>(cfg_.head_dim));
        const double angle = p * freq;
        cos_[static_cast<std::size_t>(p) * half + j] = static_cast<T>(std::cos(angle));
        sin_[static_cast<std::size_t>(p) * half + j] = static_cast<T>(std::sin(angle));
      }
    }
  }

  void run_forward(std::span<const int> tokens, Activations& act) const {
    const auto n = static_cast<Eigen::Index>(tokens.size());
    const int d = cfg_.model_dim, hd = cfg_.head_dim, H = cfg_.n_heads,
              G = cfg_.n_kv_groups;
    const T eps = static_cast<T>(cfg_.norm_eps);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const int per_group = H / G;

    Mat x(n, d);
    const auto emb = tensor(layout_.embedding);
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = emb.row(tokens[i]);

    act.layers.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const auto& L = layout_.layers[static_cast<std::size_t>(l)];
      auto& A = act.layers[static_cast<std::size_t>(l)];
      A.x_in = std::move(x);
      A.h1.resize(n, d);
      A.r1.resize(static_cast<std::size_t>(n));
      detail::rmsnorm_forward<T>(A.x_in, A.h1, 0, d, ptr(L.attn_norm), eps,
                                 A.r1.data(), 1);
      A.q_raw.noalias() = A.h1 * tensor(L.wq);
      A.k_raw.noalias() = A.h1 * tensor(L.wk);
      A.v.noalias() = A.h1 * tensor(L.wv);
      A.q.resize(n, H * hd);
      A.k.resize(n, G * hd);
      A.rq.resize(static_cast<std::size_t>(n * H));
      A.rk.resize(static_cast<std::size_t>(n * G));
      for (int h = 0; h < H; ++h) {
        detail::rmsnorm_forward<T>(A.q_raw, A.q, h * hd, hd, ptr(L.q_norm), eps,
                                   A.rq.data() + h, H);
      }
      for (int g = 0; g < G; ++g) {
        detail::rmsnorm_forward<T>(A.k_raw, A.k, g * hd, hd, ptr(L.k_norm), eps,
                                   A.rk.data() + g, G);
      }
      apply_rope(A.q, H, 0, false);
      apply_rope(A.k, G, 0, false);

      A.att.resize(n, H * hd);
      A.probs.resize(static_cast<std::size_t>(H));
      for (int h = 0; h < H; ++h) {
        const int g = h / per_group;
        Mat& P = A.probs[static_cast<std::size_t>(h)];
        P.resize(n, n);
        // row blocks only see keys up to their last row; P above those
        // columns is left unset
        for (Eigen::Index r0 = 0; r0 < n; r0 += kAttentionBlock) {
          const Eigen::Index rb = std::min(kAttentionBlock, n - r0);
          const Eigen::Index w = r0 + rb;
          auto Pb = P.block(r0, 0, rb, w);
          Pb.noalias() = A.q.block(r0, h * hd, rb, hd) *
                         A.k.block(0, g * hd, w, hd).transpose();
          causal_softmax_rows(P, r0, rb, scale);
          A.att.block(r0, h * hd, rb, hd).noalias() =
              Pb * A.v.block(0, g * hd, w, hd);
        }
      }
      A.x_mid = A.x_in;
      A.x_mid.noalias() += A.att * tensor(L.wo);

      A.h2.resize(n, d);
      A.r2.resize(static_cast<std::size_t>(n));
      detail::rmsnorm_forward<T>(A.x_mid, A.h2, 0, d, ptr(L.mlp_norm), eps,
                                 A.r2.data(), 1);
      A.a.noalias() = A.h2 * tensor(L.w_gate);
      A.b.noalias() = A.h2 * tensor(L.w_up);
      A.m.resize(A.a.rows(), A.a.cols());
      for (Eigen::Index i = 0; i < A.a.size(); ++i) {
        const T g = A.a.data()[i];
        A.m.data()[i] = g / (T(1) + std::exp(-g)) * A.b.data()[i];
      }
      x = A.x_mid;
      x.noalias() += A.m * tensor(L.w_down);
    }
    act.x_final = std::move(x);
    act.hf.resize(n, d);
    act.rf.resize(static_cast<std::size_t>(n));
    detail::rmsnorm_forward<T>(act.x_final, act.hf, 0, d,
                               ptr(layout_.final_norm), eps, act.rf.data(), 1);
    act.logits.noalias() = act.hf * tensor(layout_.lm_head);
  }

  static constexpr Eigen::Index kAttentionBlock = 128;

  // Causal softmax of rows [r0, r0+rb) of S over columns [0, r0+rb).
  static void causal_softmax_rows(Mat& S, Eigen::Index r0, Eigen::Index rb,
                                  T scale) {
    const Eigen::Index w = r0 + rb;
    for (Eigen::Index i = r0; i < w; ++i) {
      T* row = S.data() + i * S.cols();
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index j = 0; j <= i; ++j) {
        row[j] *= scale;
        mx = std::max(mx, row[j]);
      }
      T z = 0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      const T inv = T(1) / z;
      for (Eigen::Index j = 0; j <= i; ++j) row[j] *= inv;
      for (Eigen::Index j = i + 1; j < w; ++j) row[j] = T(0);
    }
  }

  T* gptr(std::vector<T>& grad, std::size_t id) const {
    return grad.data() + layout_.tensors()[id].offset;
  }
  MatMap gmat(std::vector<T>& grad, std::size_t id) const {
    const auto& t = layout_.tensors()[id];
    return MatMap(grad.data() + t.offset, t.rows, t.cols);
  }

  void run_backward(std::span<const int> tokens, const Activations& act,
                    const Mat& dlogits, std::vector<T>& grad) const {
    const Eigen::Index n = dlogits.rows();
    const int d = cfg_.model_dim, hd = cfg_.head_dim, H = cfg_.n_heads,
              G = cfg_.n_kv_groups;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const int per_group = H / G;

    gmat(grad, layout_.lm_head).noalias() += act.hf.transpose() * dlogits;
    Mat dhf = dlogits * tensor(layout_.lm_head).transpose();
    Mat dx = Mat::Zero(n, d);
    detail::rmsnorm_backward<T>(act.x_final, dhf, dx, 0, d,
                                ptr(layout_.final_norm), act.rf.data(), 1,
                                gptr(grad, layout_.final_norm));

    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
      const auto& L = layout_.layers[static_cast<std::size_t>(l)];
      const auto& A = act.layers[static_cast<std::size_t>(l)];

      // feed-forward block; dx holds d(x_out) and becomes d(x_mid)
      gmat(grad, L.w_down).noalias() += A.m.transpose() * dx;
      Mat dm = dx * tensor(L.w_down).transpose();
      Mat da(dm.rows(), dm.cols()), db(dm.rows(), dm.cols());
      for (Eigen::Index i = 0; i < dm.size(); ++i) {
        const T a = A.a.data()[i];
        const T sig = T(1) / (T(1) + std::exp(-a));
        const T silu = a * sig;
        db.data()[i] = dm.data()[i] * silu;
        da.data()[i] =
            dm.data()[i] * A.b.data()[i] * sig * (T(1) + a * (T(1) - sig));
      }
      gmat(grad, L.w_gate).noalias() += A.h2.transpose() * da;
      gmat(grad, L.w_up).noalias() += A.h2.transpose() * db;
      Mat dh2 = da * tensor(L.w_gate).transpose();
      dh2.noalias() += db * tensor(L.w_up).transpose();
      detail::rmsnorm_backward<T>(A.x_mid, dh2, dx, 0, d, ptr(L.mlp_norm),
                                  A.r2.data(), 1, gptr(grad, L.mlp_norm));

      // attention block; dx holds d(x_mid) and becomes d(x_in)
      gmat(grad, L.wo).noalias() += A.att.transpose() * dx;
      Mat datt = dx * tensor(L.wo).transpose();
      Mat dq = Mat::Zero(n, H * hd);
      Mat dk = Mat::Zero(n, G * hd);
      Mat dv = Mat::Zero(n, G * hd);
      for (int h = 0; h < H; ++h) {
        const int g = h / per_group;
        const Mat& P = A.probs[static_cast<std::size_t>(h)];
        for (Eigen::Index r0 = 0; r0 < n; r0 += kAttentionBlock) {
          const Eigen::Index rb = std::min(kAttentionBlock, n - r0);
          const Eigen::Index w = r0 + rb;
          const auto Pb = P.block(r0, 0, rb, w);
          const auto datt_b = datt.block(r0, h * hd, rb, hd);
          Mat dP = datt_b * A.v.block(0, g * hd, w, hd).transpose();
          dv.block(0, g * hd, w, hd).noalias() += Pb.transpose() * datt_b;
          // softmax backward on the causal rows, folded with the score scale
          for (Eigen::Index i = 0; i < rb; ++i) {
            const T* pr = P.data() + (r0 + i) * n;
            T* gr = dP.data() + i * w;
            const Eigen::Index last = r0 + i;
            T dot = 0;
            for (Eigen::Index j = 0; j <= last; ++j) dot += pr[j] * gr[j];
            for (Eigen::Index j = 0; j <= last; ++j) {
              gr[j] = scale * pr[j] * (gr[j] - dot);
            }
            for (Eigen::Index j = last + 1; j < w; ++j) gr[j] = T(0);
          }
          dq.block(r0, h * hd, rb, hd).noalias() +=
              dP * A.k.block(0, g * hd, w, hd);
          dk.block(0, g * hd, w, hd).noalias() +=
              dP.transpose() * A.q.block(r0, h * hd, rb, hd);
        }
      }
      apply_rope(dq, H, 0, true);
      apply_rope(dk, G, 0, true);
      Mat dq_raw = Mat::Zero(n, H * hd);
      Mat dk_raw = Mat::Zero(n, G * hd);
      for (int h = 0; h < H; ++h) {
        detail::rmsnorm_backward<T>(A.q_raw, dq, dq_raw, h * hd, hd,
                                    ptr(L.q_norm), A.rq.data() + h, H,
                                    gptr(grad, L.q_norm));
      }
      for (int g = 0; g < G; ++g) {
        detail::rmsnorm_backward<T>(A.k_raw, dk, dk_raw, g * hd, hd,
                                    ptr(L.k_norm), A.rk.data() + g, G,
                                    gptr(grad, L.k_norm));
      }
      gmat(grad, L.wq).noalias() += A.h1.transpose() * dq_raw;
      gmat(grad, L.wk).noalias() += A.h1.transpose() * dk_raw;
      gmat(grad, L.wv).noalias() += A.h1.transpose() * dv;
      Mat dh1 = dq_raw * tensor(L.wq).transpose();
      dh1.noalias() += dk_raw * tensor(L.wk).transpose();
      dh1.noalias() += dv * tensor(L.wv).transpose();
      detail::rmsnorm_backward<T>(A.x_in, dh1, dx, 0, d, ptr(L.attn_norm),
                                  A.r1.data(), 1, gptr(grad, L.attn_norm));
    }
    auto demb = gmat(grad, layout_.embedding);
    for (Eigen::Index i = 0; i < n; ++i) {
      demb.row(tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    }
  }

  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<T> params_;
  std::vector<T> cos_, sin_;
};

/// Mean negative log-likelihood of tokens[1..n) given their prefixes, from
/// the logits of a forward pass over `tokens`.
template <class Derived>
double lm_loss(const Eigen::MatrixBase<Derived>& logits,
               std::span<const int> tokens) {
  if (tokens.size() < 2) throw DomainError("lm_loss needs at least 2 tokens");
  if (static_cast<std::size_t>(logits.rows()) < tokens.size() - 1) {
    throw DomainError("lm_loss: fewer logit rows than predicted tokens");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    const auto row = logits.row(static_cast<Eigen::Index>(i)).template cast<double>();
    const double mx = row.maxCoeff();
    const double logz = mx + std::log((row.array() - mx).exp().sum());
    sum += logz - row(tokens[i + 1]);
  }
  return sum / static_cast<double>(tokens.size() - 1);
}

/// Incremental decoding with a key/value cache. Tokens are appended in
/// chunks; each call returns the logits of the chunk's last position.
template <class T>
class InferenceSession {
 public:
  using Mat = RowMajorMatrix<T>;

  explicit InferenceSession(const Transformer<T>& model) : model_(model) {
    const auto& c = model.config();
    k_.assign(static_cast<std::size_t>(c.n_layers),
              Mat(c.context_length, c.n_kv_groups * c.head_dim));
    v_ = k_;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<int>& tokens() const { return tokens_; }

  /// Drops cached positions beyond `n`.
  void truncate(std::size_t n) {
    if (n < tokens_.size()) tokens_.resize(n);
  }

  std::vector<T> append(std::span<const int> chunk) {
    const auto& c = model_.config();
    if (chunk.empty()) throw DomainError("empty chunk");
    if (tokens_.size() + chunk.size() >
        static_cast<std::size_t>(c.context_length)) {
      throw DomainError("context length exceeded during decoding");
    }
    for (int t : chunk) {
      if (t < 0 || t >= c.vocab_size) {
        throw DomainError("token id outside vocabulary");
      }
    }
    const auto& layout = model_.layout();
    const int d = c.model_dim, hd = c.head_dim, H = c.n_heads,
              G = c.n_kv_groups, per_group = H / G;
    const T eps = static_cast<T>(c.norm_eps);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const auto m = static_cast<Eigen::Index>(chunk.size());
    const auto p0 = static_cast<Eigen::Index>(tokens_.size());
    const Eigen::Index total = p0 + m;

    Mat x(m, d);
    const auto emb = model_.tensor(layout.embedding);
    for (Eigen::Index i = 0; i < m; ++i) x.row(i) = emb.row(chunk[i]);
    Mat h(m, d), qr, kr, q(m, H * hd), k(m, G * hd), att(m, H * hd), S;
    for (int l = 0; l < c.n_layers; ++l) {
      const auto& L = layout.layers[static_cast<std::size_t>(l)];
      detail::rmsnorm_forward<T>(x, h, 0, d, model_.ptr(L.attn_norm), eps,
                                 nullptr, 1);
      qr.noalias() = h * model_.tensor(L.wq);
      kr.noalias() = h * model_.tensor(L.wk);
      auto& K = k_[static_cast<std::size_t>(l)];
      auto& V = v_[static_cast<std::size_t>(l)];
      V.middleRows(p0, m).noalias() = h * model_.tensor(L.wv);
      for (int hh = 0; hh < H; ++hh) {
        detail::rmsnorm_forward<T>(qr, q, hh * hd, hd, model_.ptr(L.q_norm),
                                   eps, nullptr, 1);
      }
      for (int g = 0; g < G; ++g) {
        detail::rmsnorm_forward<T>(kr, k, g * hd, hd, model_.ptr(L.k_norm),
                                   eps, nullptr, 1);
      }
      model_.apply_rope(q, H, static_cast<int>(p0), false);
      model_.apply_rope(k, G, static_cast<int>(p0), false);
      K.middleRows(p0, m) = k;
      for (int hh = 0; hh < H; ++hh) {
        const int g = hh / per_group;
        S.noalias() = q.middleCols(hh * hd, hd) *
                      K.topRows(total).middleCols(g * hd, hd).transpose();
        for (Eigen::Index i = 0; i < m; ++i) {
          T* row = S.data() + i * total;
          const Eigen::Index last = p0 + i;
          T mx = -std::numeric_limits<T>::infinity();
          for (Eigen::Index j = 0; j <= last; ++j) {
            row[j] *= scale;
            mx = std::max(mx, row[j]);
          }
          T z = 0;
          for (Eigen::Index j = 0; j <= last; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
          }
          const T inv = T(1) / z;
          for (Eigen::Index j = 0; j <= last; ++j) row[j] *= inv;
          for (Eigen::Index j = last + 1; j < total; ++j) row[j] = T(0);
        }
        att.middleCols(hh * hd, hd).noalias() =
            S * V.topRows(total).middleCols(g * hd, hd);
      }
      x.noalias() += att * model_.tensor(L.wo);
      detail::rmsnorm_forward<T>(x, h, 0, d, model_.ptr(L.mlp_norm), eps,
                                 nullptr, 1);
      Mat a = h * model_.tensor(L.w_gate);
      Mat b = h * model_.tensor(L.w_up);
      for (Eigen::Index i = 0; i < a.size(); ++i) {
        const T g = a.data()[i];
        a.data()[i] = g / (T(1) + std::exp(-g)) * b.data()[i];
      }
      x.noalias() += a * model_.tensor(L.w_down);
    }
    Mat last = x.bottomRows(1);
    Mat hl(1, d);
    detail::rmsnorm_forward<T>(last, hl, 0, d, model_.ptr(layout.final_norm),
                               eps, nullptr, 1);
    Mat logits = hl * model_.tensor(layout.lm_head);
    tokens_.insert(tokens_.end(), chunk.begin(), chunk.end());
    return std::vector<T>(logits.data(), logits.data() + logits.size());
  }

 private:
  const Transformer<T>& model_;
  std::vector<int> tokens_;
  std::vector<Mat> k_, v_;
};

}  // namespace bbo
