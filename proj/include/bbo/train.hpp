// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bbo/error.hpp"
#include "bbo/model.hpp"
#include "bbo/rng.hpp"

namespace bbo {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

struct TrainConfig {
  double learning_rate = 3e-3;
  int global_batch_size = 8;  // context windows per optimizer step
  std::uint64_t total_tokens = 1 << 20;
  double warmup_fraction = 0.10;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 0;
  int eval_interval = 25;     // steps between validation measurements
  int max_eval_windows = 64;  // 0 evaluates every validation window

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (global_batch_size <= 0) {
      throw ConfigError("global_batch_size must be positive");
    }
    if (total_tokens == 0) throw ConfigError("total_tokens must be positive");
    if (!(warmup_fraction > 0 && warmup_fraction < 1)) {
      throw ConfigError("warmup_fraction must lie in (0, 1)");
    }
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (!(grad_clip_norm > 0)) throw ConfigError("grad_clip_norm must be > 0");
    if (eval_interval <= 0) throw ConfigError("eval_interval must be positive");
    if (max_eval_windows < 0) {
      throw ConfigError("max_eval_windows must be >= 0");
    }
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"global_batch_size", c.global_batch_size},
          {"total_tokens", c.total_tokens},
          {"warmup_fraction", c.warmup_fraction},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"grad_clip_norm", c.grad_clip_norm},
          {"seed", c.seed},
          {"eval_interval", c.eval_interval},
          {"max_eval_windows", c.max_eval_windows}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.global_batch_size = j.value("global_batch_size", c.global_batch_size);
  c.total_tokens = j.value("total_tokens", c.total_tokens);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  c.seed = j.value("seed", c.seed);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.max_eval_windows = j.value("max_eval_windows", c.max_eval_windows);
  c.validate();
  return c;
}

/// C = 6 N D.
inline double flops_estimate(double n_params, double n_tokens) {
  if (!(n_params > 0 && n_tokens > 0)) {
    throw DomainError("flops_estimate needs positive N and D");
  }
  return 6.0 * n_params * n_tokens;
}

inline std::size_t warmup_steps(std::size_t total_steps, double fraction) {
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(fraction * total_steps)));
}

/// Learning rate for 0-based `step`: linear ramp reaching `peak` at the last
/// warm-up step, then cosine decay from `peak` down to 0 at the final step.
inline double learning_rate_at(std::size_t step, std::size_t total_steps,
                               double peak, double warmup_fraction) {
  if (total_steps == 0) return 0.0;
  const std::size_t warm = warmup_steps(total_steps, warmup_fraction);
  if (step < warm) {
    return peak * static_cast<double>(step + 1) / static_cast<double>(warm);
  }
  const std::size_t span = total_steps - 1 > warm ? total_steps - 1 - warm : 1;
  const double progress =
      std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span));
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Concatenates documents with an end-of-sequence id after each one.
inline std::vector<int> pack_documents(
    const std::vector<std::vector<int>>& docs, int eos) {
  std::vector<int> out;
  std::size_t total = 0;
  for (const auto& d : docs) total += d.size() + 1;
  out.reserve(total);
  for (const auto& d : docs) {
    out.insert(out.end(), d.begin(), d.end());
    out.push_back(eos);
  }
  return out;
}

/// Start offsets of context windows over a packed stream. Each window spans
/// context+1 tokens (inputs plus shifted targets); consecutive windows share
/// one boundary token. A stream shorter than one full window yields a single
/// short window when it has at least 2 tokens.
inline std::vector<std::size_t> window_starts(std::size_t stream_len,
                                              std::size_t context) {
  std::vector<std::size_t> out;
  if (stream_len < 2) return out;
  if (stream_len < context + 1) return {0};
  for (std::size_t s = 0; s + context + 1 <= stream_len; s += context) {
    out.push_back(s);
  }
  return out;
}

struct LossRecord {
  std::size_t step = 0;
  std::uint64_t tokens = 0;
  double learning_rate = 0.0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

inline nlohmann::json to_json(const LossRecord& r) {
  auto num = [](double v) -> nlohmann::json {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  };
  return {{"step", r.step},
          {"tokens", r.tokens},
          {"lr", r.learning_rate},
          {"train_loss", num(r.train_loss)},
          {"val_loss", num(r.val_loss)}};
}

inline LossRecord loss_record_from_json(const nlohmann::json& j) {
  auto num = [](const nlohmann::json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                       : v.get<double>();
  };
  LossRecord r;
  r.step = j.at("step").get<std::size_t>();
  r.tokens = j.at("tokens").get<std::uint64_t>();
  r.learning_rate = j.at("lr").get<double>();
  r.train_loss = num(j.at("train_loss"));
  r.val_loss = num(j.at("val_loss"));
  return r;
}

inline void write_loss_csv(std::ostream& os,
                           const std::vector<LossRecord>& history) {
  os << "step,tokens,lr,train_loss,val_loss\n";
  os << std::setprecision(10);
  for (const auto& r : history) {
    os << r.step << ',' << r.tokens << ',' << r.learning_rate << ',';
    if (std::isfinite(r.train_loss)) os << r.train_loss;
    os << ',';
    if (std::isfinite(r.val_loss)) os << r.val_loss;
    os << '\n';
  }
}

/// Token-weighted mean next-token loss over the windows of `stream`. When
/// `max_windows` > 0 only the first that many windows are used.
template <class T>
double evaluate_loss(const Transformer<T>& model, std::span<const int> stream,
                     std::size_t max_windows = 0) {
  const auto ctx = static_cast<std::size_t>(model.config().context_length);
  const auto starts = window_starts(stream.size(), ctx);
  if (starts.empty()) throw DomainError("evaluate_loss: empty corpus");
  const std::size_t n =
      max_windows ? std::min(max_windows, starts.size()) : starts.size();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t w = 0; w < n; ++w) {
    const std::size_t len = std::min(ctx + 1, stream.size() - starts[w]);
    auto win = stream.subspan(starts[w], len);
    auto [s, c] = model.loss_and_grad(win.first(len - 1), win.subspan(1),
                                      nullptr);
    sum += s;
    count += c;
  }
  return sum / static_cast<double>(count);
}

/// Decoupled-weight-decay Adam. Decay applies to matrices only.
class AdamW {
 public:
  AdamW(const ParamLayout& layout, const TrainConfig& cfg)
      : cfg_(cfg),
        m_(layout.total(), 0.0f),
        v_(layout.total(), 0.0f),
        decay_(layout.total(), 0) {
    for (const auto& t : layout.tensors()) {
      if (t.is_matrix()) {
        std::fill(decay_.begin() + static_cast<long>(t.offset),
                  decay_.begin() + static_cast<long>(t.offset + t.size()), 1);
      }
    }
  }

  std::size_t steps() const { return t_; }

  void step(std::vector<float>& params, const std::vector<float>& grad,
            double lr) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const auto flr = static_cast<float>(lr);
    const auto fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);
    const auto step_size = static_cast<float>(lr / c1);
    const auto inv_c2 = static_cast<float>(1.0 / c2);
    const auto eps = static_cast<float>(cfg_.adam_eps);
    const auto wd = static_cast<float>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const float g = grad[i];
      m_[i] = fb1 * m_[i] + (1.0f - fb1) * g;
      v_[i] = fb2 * v_[i] + (1.0f - fb2) * g * g;
      if (decay_[i]) params[i] -= flr * wd * params[i];
      params[i] -= step_size * m_[i] / (std::sqrt(v_[i] * inv_c2) + eps);
    }
  }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<float> m_, v_;
  std::vector<unsigned char> decay_;
};

/// Rescales `grad` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(std::vector<float>& grad, double max_norm) {
  double ss = 0.0;
  for (float g : grad) ss += static_cast<double>(g) * g;
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const auto s = static_cast<float>(max_norm / (norm + 1e-12));
    for (float& g : grad) g *= s;
  }
  return norm;
}

struct ModelCheckpoint {
  ModelConfig config;
  TrainConfig train;
  std::size_t step = 0;
  std::vector<LossRecord> history;
  Transformer<float> model;

  explicit ModelCheckpoint(ModelConfig c) : config(c), model(c) {}
};

/// Hex digest of the parameter bytes; stable across save/load.
inline std::string checkpoint_id(const ModelCheckpoint& ck) {
  const auto& p = ck.model.params();
  std::uint64_t h = fnv1a(std::string_view(
      reinterpret_cast<const char*>(p.data()), p.size() * sizeof(float)));
  h = mix64(h ^ fnv1a(to_json(ck.config).dump()));
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::size_t train_steps(const ModelConfig& m, const TrainConfig& t) {
  const std::uint64_t per_step =
      static_cast<std::uint64_t>(t.global_batch_size) *
      static_cast<std::uint64_t>(m.context_length);
  return static_cast<std::size_t>(t.total_tokens / per_step);
}

using TrainCallback = std::function<void(const LossRecord&)>;

/// Trains `ck.model` in place on the packed `train_stream`; validation loss
/// on `val_stream` (may be empty) is measured before the first step, every
/// eval_interval steps and after the last step.
inline void train_model(ModelCheckpoint& ck, std::span<const int> train_stream,
                        std::span<const int> val_stream,
                        const TrainCallback& on_record = {}) {
  const TrainConfig& tc = ck.train;
  tc.validate();
  const auto ctx = static_cast<std::size_t>(ck.config.context_length);
  const auto starts = window_starts(train_stream.size(), ctx);
  if (starts.empty() || train_stream.size() < ctx + 1) {
    throw DomainError("corpus too small for one step: " +
                      std::to_string(train_stream.size()) +
                      " tokens, need at least " + std::to_string(ctx + 1));
  }
  const std::size_t total = train_steps(ck.config, tc);
  const auto batch = static_cast<std::size_t>(tc.global_batch_size);
  const std::size_t eval_cap = static_cast<std::size_t>(tc.max_eval_windows);
  auto validate_now = [&]() {
    return val_stream.size() >= 2
               ? evaluate_loss(ck.model, val_stream, eval_cap)
               : std::numeric_limits<double>::quiet_NaN();
  };
  auto emit = [&](const LossRecord& r) {
    ck.history.push_back(r);
    if (on_record) on_record(r);
  };

  if (ck.step == 0) {
    LossRecord r0;
    r0.val_loss = validate_now();
    emit(r0);
  }
  if (total == 0) return;

  AdamW opt(ck.model.layout(), tc);
  Rng rng(derive_seed(tc.seed, "batches", "train", 0));
  std::vector<std::size_t> order(starts.size());
  std::size_t cursor = order.size();
  std::vector<float> grad(ck.model.params().size());
  for (std::size_t step = 0; step < total; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0f);
    std::vector<std::size_t> picked;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        cursor = 0;
      }
      picked.push_back(starts[order[cursor++]]);
    }
    const auto scale = 1.0f / static_cast<float>(batch * ctx);
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t s : picked) {
      auto win = train_stream.subspan(s, ctx + 1);
      auto [ls, lc] = ck.model.loss_and_grad(win.first(ctx), win.subspan(1),
                                             &grad, scale);
      sum += ls;
      count += lc;
    }
    clip_global_norm(grad, tc.grad_clip_norm);
    const double lr =
        learning_rate_at(step, total, tc.learning_rate, tc.warmup_fraction);
    opt.step(ck.model.params(), grad, lr);
    ++ck.step;

    LossRecord r;
    r.step = ck.step;
    r.tokens = static_cast<std::uint64_t>(ck.step) * batch * ctx;
    r.learning_rate = lr;
    r.train_loss = sum / static_cast<double>(count);
    if (ck.step % static_cast<std::size_t>(tc.eval_interval) == 0 ||
        step + 1 == total) {
      r.val_loss = validate_now();
    }
    emit(r);
  }
}

/// Layout: 8-byte magic "BBOCKPT1", u64 little-endian header length, JSON
/// header, then each tensor of the layout in order as little-endian float32.
inline void save_checkpoint(const ModelCheckpoint& ck, std::ostream& os) {
  nlohmann::json header;
  header["format"] = "bbo-forge-checkpoint";
  header["version"] = 1;
  header["config"] = to_json(ck.config);
  header["train"] = to_json(ck.train);
  header["step"] = ck.step;
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (const auto& t : ck.model.layout().tensors()) {
    tensors.push_back({{"name", t.name},
                       {"shape", t.cols == 1 ? nlohmann::json{t.rows}
                                             : nlohmann::json{t.rows, t.cols}},
                       {"offset", t.offset}});
  }
  auto& hist = header["history"] = nlohmann::json::array();
  for (const auto& r : ck.history) hist.push_back(to_json(r));
  const std::string text = header.dump();
  const std::uint64_t len = text.size();
  os.write("BBOCKPT1", 8);
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& p = ck.model.params();
  os.write(reinterpret_cast<const char*>(p.data()),
           static_cast<std::streamsize>(p.size() * sizeof(float)));
  if (!os) throw Error("failed writing checkpoint");
}

inline ModelCheckpoint load_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, "BBOCKPT1", 8) != 0) {
    throw ParseError("not a bbo-forge checkpoint", 0);
  }
  std::uint64_t len = 0;
  if (!is.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 30)) {
    throw ParseError("truncated checkpoint header", 8);
  }
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) {
    throw ParseError("truncated checkpoint header", 16);
  }
  const auto header = nlohmann::json::parse(text);
  ModelCheckpoint ck(model_config_from_json(header.at("config")));
  ck.train = train_config_from_json(header.at("train"));
  ck.step = header.at("step").get<std::size_t>();
  const auto& expected = ck.model.layout().tensors();
  const auto& listed = header.at("tensors");
  if (listed.size() != expected.size()) {
    throw ParseError("checkpoint tensor list does not match config", 16);
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (listed[i].at("name").get<std::string>() != expected[i].name ||
        listed[i].at("offset").get<std::size_t>() != expected[i].offset) {
      throw ParseError("checkpoint tensor " + expected[i].name +
                           " does not match config",
                       16);
    }
  }
  for (const auto& r : header.at("history")) {
    ck.history.push_back(loss_record_from_json(r));
  }
  auto& p = ck.model.params();
  if (!is.read(reinterpret_cast<char*>(p.data()),
               static_cast<std::streamsize>(p.size() * sizeof(float)))) {
    throw ParseError("truncated checkpoint tensors", 16 + len);
  }
  return ck;
}

inline void save_checkpoint(const ModelCheckpoint& ck,
                            const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  save_checkpoint(ck, os);
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  return load_checkpoint(is);
}

}  // namespace bbo
