#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "safer/activation_store.hpp"
#include "safer/binary_io.hpp"
#include "safer/error.hpp"
#include "safer/text.hpp"

namespace safer {

/// Learned dictionary of a TopK sparse autoencoder.
///
/// `enc` is M x d row-major. `dec` stores W_dec (d x M) column-major, so
/// feature i's decoder direction is the contiguous slice dec_col(i).
template <std::floating_point T = float>
struct SaeParams {
  std::size_t d = 0;
  std::size_t M = 0;
  std::size_t K = 0;
  std::vector<T> enc;
  std::vector<T> dec;
  std::vector<T> b_pre;

  SaeParams() = default;
  SaeParams(std::size_t d_, std::size_t M_, std::size_t K_)
      : d(d_), M(M_), K(K_), enc(M_ * d_), dec(M_ * d_), b_pre(d_) {}

  std::span<T> enc_row(std::size_t i) { return std::span<T>(enc).subspan(i * d, d); }
  std::span<const T> enc_row(std::size_t i) const {
    return std::span<const T>(enc).subspan(i * d, d);
  }
  std::span<T> dec_col(std::size_t i) { return std::span<T>(dec).subspan(i * d, d); }
  std::span<const T> dec_col(std::size_t i) const {
    return std::span<const T>(dec).subspan(i * d, d);
  }

  template <std::floating_point U>
  SaeParams<U> cast() const {
    SaeParams<U> out(d, M, K);
    std::copy(enc.begin(), enc.end(), out.enc.begin());
    std::copy(dec.begin(), dec.end(), out.dec.begin());
    std::copy(b_pre.begin(), b_pre.end(), out.b_pre.begin());
    return out;
  }

  bool operator==(const SaeParams&) const = default;
};

/// Nonzero latents, sorted by feature index.
template <std::floating_point T = float>
struct SparseLatent {
  std::size_t M = 0;
  std::vector<std::uint32_t> index;
  std::vector<T> value;

  std::size_t nnz() const { return index.size(); }

  std::vector<T> dense() const {
    std::vector<T> out(M, T{0});
    for (std::size_t j = 0; j < index.size(); ++j) out[index[j]] = value[j];
    return out;
  }
};

namespace detail {

template <typename T, typename U>
double dot(std::span<const T> a, std::span<const U> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace detail

/// Keeps the K largest strictly positive entries of `pre`, ties to the lower
/// index. Writes the kept indices (ascending) to `out`.
inline void topk_positive(std::span<const double> pre, std::size_t K,
                          std::vector<std::uint32_t>& out) {
  out.clear();
  for (std::size_t i = 0; i < pre.size(); ++i)
    if (pre[i] > 0.0) out.push_back(static_cast<std::uint32_t>(i));
  if (out.size() > K) {
    auto stronger = [&](std::uint32_t a, std::uint32_t b) {
      return pre[a] > pre[b] || (pre[a] == pre[b] && a < b);
    };
    std::nth_element(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(K), out.end(), stronger);
    out.resize(K);
    std::sort(out.begin(), out.end());
  }
}

/// Scratch buffers reused across encode calls on one thread.
struct EncodeWorkspace {
  std::vector<double> centered;
  std::vector<double> pre;
  std::vector<std::uint32_t> active;
};

template <std::floating_point T, std::floating_point In>
void encode_into(std::span<const In> x, const SaeParams<T>& params, SparseLatent<T>& z,
                 EncodeWorkspace& ws) {
  if (x.size() != params.d)
    throw DimensionError("encode: input length " + std::to_string(x.size()) + " != d " +
                         std::to_string(params.d));
  ws.centered.resize(params.d);
  for (std::size_t k = 0; k < params.d; ++k)
    ws.centered[k] = static_cast<double>(x[k]) - static_cast<double>(params.b_pre[k]);
  ws.pre.resize(params.M);
  for (std::size_t i = 0; i < params.M; ++i)
    ws.pre[i] = detail::dot<T, double>(params.enc_row(i), ws.centered);
  topk_positive(ws.pre, params.K, ws.active);
  z.M = params.M;
  z.index.assign(ws.active.begin(), ws.active.end());
  z.value.resize(ws.active.size());
  for (std::size_t j = 0; j < ws.active.size(); ++j)
    z.value[j] = static_cast<T>(ws.pre[ws.active[j]]);
}

/// z = TopK(W_enc (x - b_pre)), keeping only positive pre-activations.
template <std::floating_point T, std::floating_point In>
SparseLatent<T> encode(std::span<const In> x, const SaeParams<T>& params) {
  SparseLatent<T> z;
  EncodeWorkspace ws;
  encode_into(x, params, z, ws);
  return z;
}

template <std::floating_point T>
void decode_into(const SparseLatent<T>& z, const SaeParams<T>& params, std::span<double> out) {
  if (z.M != params.M)
    throw DimensionError("decode: latent length " + std::to_string(z.M) + " != M " +
                         std::to_string(params.M));
  for (std::size_t k = 0; k < params.d; ++k) out[k] = params.b_pre[k];
  for (std::size_t j = 0; j < z.nnz(); ++j) {
    const auto col = params.dec_col(z.index[j]);
    const double zj = z.value[j];
    for (std::size_t k = 0; k < params.d; ++k) out[k] += zj * col[k];
  }
}

/// x_hat = W_dec z + b_pre over the nonzeros of z.
template <std::floating_point T>
std::vector<T> decode(const SparseLatent<T>& z, const SaeParams<T>& params) {
  std::vector<double> acc(params.d);
  decode_into(z, params, std::span<double>(acc));
  return std::vector<T>(acc.begin(), acc.end());
}

/// Contiguous batch of row vectors.
template <std::floating_point T>
struct RowsView {
  std::span<const T> data;
  std::size_t d = 0;

  std::size_t rows() const { return d == 0 ? 0 : data.size() / d; }
  std::span<const T> row(std::size_t i) const { return data.subspan(i * d, d); }
};

/// Mean squared reconstruction error over the batch.
template <std::floating_point T, std::floating_point In>
double loss(RowsView<In> batch, const SaeParams<T>& params) {
  if (batch.rows() == 0) throw DataError("loss: empty batch");
  if (batch.d != params.d) throw DimensionError("loss: batch dimension != d");
  SparseLatent<T> z;
  EncodeWorkspace ws;
  std::vector<double> xhat(params.d);
  double total = 0.0;
  for (std::size_t s = 0; s < batch.rows(); ++s) {
    const auto x = batch.row(s);
    encode_into(x, params, z, ws);
    decode_into(z, params, std::span<double>(xhat));
    for (std::size_t k = 0; k < params.d; ++k) {
      const double e = xhat[k] - x[k];
      total += e * e;
    }
  }
  return total / static_cast<double>(batch.rows());
}

template <std::floating_point T>
struct SaeGradients {
  std::vector<T> enc;
  std::vector<T> dec;
  std::vector<T> b_pre;

  void reset(const SaeParams<T>& p) {
    enc.assign(p.enc.size(), T{0});
    dec.assign(p.dec.size(), T{0});
    b_pre.assign(p.b_pre.size(), T{0});
  }
};

/// Forward pass plus analytic backward pass of the batch-mean loss. The TopK
/// mask is held fixed per sample. Returns the loss; gradients go to `grad`.
/// Optional `fired` receives one bit per feature that was active anywhere.
template <std::floating_point T, std::floating_point In>
double loss_and_gradients(RowsView<In> batch, const SaeParams<T>& params, SaeGradients<T>& grad,
                          std::vector<std::uint8_t>* fired = nullptr) {
  if (batch.rows() == 0) throw DataError("gradients: empty batch");
  if (batch.d != params.d) throw DimensionError("gradients: batch dimension != d");
  const std::size_t d = params.d;
  grad.reset(params);
  if (fired) fired->assign(params.M, 0);

  SparseLatent<T> z;
  EncodeWorkspace ws;
  std::vector<double> xhat(d);
  std::vector<double> r(d);
  std::vector<double> gb(d, 0.0);
  const double scale = 2.0 / static_cast<double>(batch.rows());
  double total = 0.0;

  for (std::size_t s = 0; s < batch.rows(); ++s) {
    const auto x = batch.row(s);
    encode_into(x, params, z, ws);
    decode_into(z, params, std::span<double>(xhat));
    for (std::size_t k = 0; k < d; ++k) {
      const double e = xhat[k] - x[k];
      total += e * e;
      r[k] = scale * e;
      gb[k] += r[k];
    }
    for (std::size_t j = 0; j < z.nnz(); ++j) {
      const std::size_t i = z.index[j];
      if (fired) (*fired)[i] = 1;
      const double zi = z.value[j];
      auto gdec = std::span<T>(grad.dec).subspan(i * d, d);
      const auto col = params.dec_col(i);
      double gz = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        gdec[k] += static_cast<T>(r[k] * zi);
        gz += static_cast<double>(col[k]) * r[k];
      }
      auto genc = std::span<T>(grad.enc).subspan(i * d, d);
      const auto row = params.enc_row(i);
      for (std::size_t k = 0; k < d; ++k) {
        genc[k] += static_cast<T>(gz * ws.centered[k]);
        gb[k] -= gz * static_cast<double>(row[k]);
      }
    }
  }
  for (std::size_t k = 0; k < d; ++k) grad.b_pre[k] = static_cast<T>(gb[k]);
  return total / static_cast<double>(batch.rows());
}

template <std::floating_point T, std::floating_point In>
SaeGradients<T> gradients(RowsView<In> batch, const SaeParams<T>& params) {
  SaeGradients<T> g;
  loss_and_gradients(batch, params, g);
  return g;
}

/// Rescales every decoder column to unit Euclidean norm. Zero columns are
/// left untouched.
template <std::floating_point T>
void normalize_decoder(SaeParams<T>& p) {
  for (std::size_t i = 0; i < p.M; ++i) {
    auto col = p.dec_col(i);
    double n = 0.0;
    for (T v : col) n += static_cast<double>(v) * v;
    n = std::sqrt(n);
    if (n == 0.0) continue;
    for (T& v : col) v = static_cast<T>(v / n);
  }
}

template <std::floating_point T>
double max_decoder_norm_error(const SaeParams<T>& p) {
  double worst = 0.0;
  for (std::size_t i = 0; i < p.M; ++i) {
    const auto col = p.dec_col(i);
    worst = std::max(worst, std::abs(std::sqrt(detail::dot<T, T>(col, col)) - 1.0));
  }
  return worst;
}

/// Random unit decoder columns, encoder tied to the decoder transpose, and
/// b_pre set to the mean of `sample` (zeros without one).
template <std::floating_point T = float>
SaeParams<T> init_params(std::size_t d, std::size_t M, std::size_t K, std::uint64_t seed,
                         std::optional<RowsView<float>> sample = std::nullopt) {
  if (d == 0 || M == 0) throw ConfigError("init_params: d and M must be positive");
  if (K == 0 || K > M) throw ConfigError("init_params: K must be in [1, M]");
  SaeParams<T> p(d, M, K);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> col(d);
  for (std::size_t i = 0; i < M; ++i) {
    double n = 0.0;
    for (auto& v : col) {
      v = normal(rng);
      n += v * v;
    }
    n = std::sqrt(n);
    auto dc = p.dec_col(i);
    auto er = p.enc_row(i);
    for (std::size_t k = 0; k < d; ++k) {
      dc[k] = static_cast<T>(col[k] / n);
      er[k] = dc[k];
    }
  }
  normalize_decoder(p);
  if (sample && sample->rows() > 0) {
    if (sample->d != d) throw DimensionError("init_params: sample dimension != d");
    std::vector<double> mean(d, 0.0);
    for (std::size_t s = 0; s < sample->rows(); ++s) {
      const auto x = sample->row(s);
      for (std::size_t k = 0; k < d; ++k) mean[k] += x[k];
    }
    for (std::size_t k = 0; k < d; ++k)
      p.b_pre[k] = static_cast<T>(mean[k] / static_cast<double>(sample->rows()));
  }
  return p;
}

/// Adaptive-moment optimizer state (no weight decay, constant step size).
template <std::floating_point T>
class AdamOptimizer {
 public:
  struct Settings {
    double learning_rate = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  AdamOptimizer(const SaeParams<T>& p, Settings s)
      : s_(s),
        m_enc_(p.enc.size()), v_enc_(p.enc.size()),
        m_dec_(p.dec.size()), v_dec_(p.dec.size()),
        m_b_(p.b_pre.size()), v_b_(p.b_pre.size()) {}

  void step(SaeParams<T>& p, const SaeGradients<T>& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
    update(p.enc, g.enc, m_enc_, v_enc_, c1, c2);
    update(p.dec, g.dec, m_dec_, v_dec_, c1, c2);
    update(p.b_pre, g.b_pre, m_b_, v_b_, c1, c2);
  }

  std::uint64_t steps() const { return t_; }

 private:
  void update(std::vector<T>& w, const std::vector<T>& g, std::vector<double>& m,
              std::vector<double>& v, double c1, double c2) const {
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = s_.beta1 * m[i] + (1.0 - s_.beta1) * gi;
      v[i] = s_.beta2 * v[i] + (1.0 - s_.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] = static_cast<T>(w[i] - s_.learning_rate * mhat / (std::sqrt(vhat) + s_.epsilon));
    }
  }

  Settings s_;
  std::uint64_t t_ = 0;
  std::vector<double> m_enc_, v_enc_, m_dec_, v_dec_, m_b_, v_b_;
};

// ---------------------------------------------------------------------------
// Checkpoints

namespace checkpoint_format {
inline constexpr char kMagic[5] = "SAEP";
inline constexpr std::uint32_t kVersion = 1;
}  // namespace checkpoint_format

inline std::string checkpoint_sidecar_path(const std::string& path) { return path + ".meta"; }

inline std::uint64_t save_checkpoint(const SaeParams<float>& p, const std::string& path,
                                     const text::KeyValues& sidecar = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(checkpoint_format::kMagic, 4);
  binio::put<std::uint32_t>(out, checkpoint_format::kVersion);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.d));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.M));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.K));
  binio::put_array<float>(out, p.b_pre);
  binio::put_array<float>(out, p.enc);
  binio::put_array<float>(out, p.dec);
  out.flush();
  if (!out) throw IoError("write failed: " + path);
  text::KeyValues kv = {{"d", std::to_string(p.d)},
                        {"M", std::to_string(p.M)},
                        {"K", std::to_string(p.K)}};
  kv.insert(kv.end(), sidecar.begin(), sidecar.end());
  text::write_key_values(checkpoint_sidecar_path(path), kv);
  return 20 + 4 * (p.b_pre.size() + p.enc.size() + p.dec.size());
}

inline SaeParams<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open checkpoint " + path);
  if (!binio::check_magic(in, checkpoint_format::kMagic))
    throw FormatError(FormatFault::kBadMagic, path + ": bad magic, not an SAE checkpoint");
  std::uint32_t version = 0, d = 0, M = 0, K = 0;
  if (!binio::get(in, version))
    throw FormatError(FormatFault::kTruncated, path + ": truncated header");
  if (version != checkpoint_format::kVersion)
    throw FormatError(FormatFault::kUnsupportedVersion,
                      path + ": unsupported checkpoint version " + std::to_string(version));
  if (!binio::get(in, d) || !binio::get(in, M) || !binio::get(in, K))
    throw FormatError(FormatFault::kTruncated, path + ": truncated header");
  if (d == 0 || M == 0 || K == 0 || K > M)
    throw FormatError(FormatFault::kCorrupt, path + ": inconsistent shape header");
  SaeParams<float> p(d, M, K);
  if (!binio::get_array<float>(in, p.b_pre) || !binio::get_array<float>(in, p.enc) ||
      !binio::get_array<float>(in, p.dec))
    throw FormatError(FormatFault::kTruncated, path + ": truncated parameter payload");
  if (in.peek() != std::char_traits<char>::eof())
    throw FormatError(FormatFault::kCorrupt, path + ": trailing bytes after parameters");
  for (const auto* v : {&p.b_pre, &p.enc, &p.dec})
    for (float x : *v)
      if (!std::isfinite(x)) throw FormatError(FormatFault::kCorrupt, path + ": non-finite parameter");
  return p;
}

}  // namespace safer
