#include "lhg/nn.hpp"

#include "lhg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <thread>

namespace lhg::nn {

std::size_t ParameterStore::add(std::string name, Matrix init) {
  if (by_name_.count(name) != 0) throw InvalidConfig("duplicate parameter name: " + name);
  const std::size_t slot = values_.size();
  by_name_.emplace(name, slot);
  names_.push_back(std::move(name));
  values_.push_back(std::move(init));
  return slot;
}

std::size_t ParameterStore::index(std::string_view name) const {
  const auto it = by_name_.find(name);
  if (it == by_name_.end()) throw InvalidInput("unknown parameter: " + std::string(name));
  return it->second;
}

bool ParameterStore::contains(std::string_view name) const { return by_name_.find(name) != by_name_.end(); }

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

std::vector<Matrix> ParameterStore::zero_grads() const {
  std::vector<Matrix> g;
  g.reserve(values_.size());
  for (const auto& v : values_) g.push_back(Matrix::Zero(v.rows(), v.cols()));
  return g;
}

void accumulate(Gradients& dst, const Gradients& src, double weight) {
  if (dst.size() < src.size()) dst.resize(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].size() == 0) continue;
    if (dst[i].size() == 0) {
      dst[i] = weight * src[i];
    } else {
      dst[i] += weight * src[i];
    }
  }
}

double global_norm(const Gradients& grads) {
  double s = 0.0;
  for (const auto& g : grads) s += g.squaredNorm();
  return std::sqrt(s);
}

Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = stddev * standard_normal(rng);
  }
  return m;
}

Linear Linear::create(ParameterStore& store, const std::string& prefix, int in, int out, Rng& rng, bool has_bias,
                      double gain) {
  Linear l;
  l.in = in;
  l.out = out;
  l.has_bias = has_bias;
  l.weight = store.add(prefix + ".weight", normal_init(in, out, gain / std::sqrt(static_cast<double>(in)), rng));
  if (has_bias) l.bias = store.add(prefix + ".bias", Matrix::Zero(1, out));
  return l;
}

ad::Var Linear::operator()(ad::Tape& tape, const ParameterStore& store, const ad::Var& x) const {
  if (x.cols() != in) {
    throw InvalidInput("linear layer expects width " + std::to_string(in) + ", got " + std::to_string(x.cols()));
  }
  ad::Var y = ad::matmul(x, tape.parameter(store.value(weight), weight));
  if (has_bias) y = ad::add(y, tape.parameter(store.value(bias), bias));
  return y;
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& prefix, int width) {
  LayerNorm ln;
  ln.gain = store.add(prefix + ".gain", Matrix::Ones(1, width));
  ln.bias = store.add(prefix + ".bias", Matrix::Zero(1, width));
  return ln;
}

ad::Var LayerNorm::operator()(ad::Tape& tape, const ParameterStore& store, const ad::Var& x) const {
  return ad::layer_norm_rows(x, tape.parameter(store.value(gain), gain), tape.parameter(store.value(bias), bias));
}

Conv1d Conv1d::create(ParameterStore& store, const std::string& prefix, int in, int out, int kernel, int stride,
                      int pad, Rng& rng) {
  Conv1d c;
  c.proj = Linear::create(store, prefix, in * kernel, out, rng);
  c.kernel = kernel;
  c.stride = stride;
  c.pad = pad;
  return c;
}

ad::Var Conv1d::operator()(ad::Tape& tape, const ParameterStore& store, const ad::Var& x) const {
  return proj(tape, store, ad::unfold_rows(x, kernel, stride, pad));
}

ad::Var attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, int heads, const Matrix& bias) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) throw InvalidInput("attention: q/k/v shapes disagree");
  if (heads < 1 || q.cols() % heads != 0 || v.cols() % heads != 0) {
    throw InvalidInput("attention: head count must divide the width");
  }
  const Eigen::Index dh = q.cols() / heads;
  const Eigen::Index dv = v.cols() / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  if (heads == 1) {
    return ad::matmul(ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), s), bias), v);
  }
  std::vector<ad::Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const auto qh = ad::slice_cols(q, h * dh, dh);
    const auto kh = ad::slice_cols(k, h * dh, dh);
    const auto vh = ad::slice_cols(v, h * dv, dv);
    outs.push_back(ad::matmul(ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), s), bias), vh));
  }
  return ad::concat_cols(outs);
}

Matrix band_mask(Eigen::Index nq, Eigen::Index nk, int radius) {
  if (radius < 0) return Matrix();
  Matrix m(nq, nk);
  const double neg = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < nq; ++i) {
    for (Eigen::Index j = 0; j < nk; ++j) m(i, j) = std::abs(i - j) <= radius ? 0.0 : neg;
  }
  return m;
}

RowVector sinusoidal_embedding(double position, int width) {
  RowVector e(width);
  const int half = width / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
    e(i) = std::sin(position * freq);
    e(half + i) = std::cos(position * freq);
  }
  if (width % 2 == 1) e(width - 1) = 0.0;
  return e;
}

double Adam::step(ParameterStore& store, Gradients grads, double clip) {
  if (m_.empty()) {
    m_ = store.zero_grads();
    v_ = store.zero_grads();
  }
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm");
  const double factor = (clip > 0.0 && norm > clip) ? clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (i >= grads.size() || grads[i].size() == 0) continue;
    const Matrix g = grads[i] * factor;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    store.value(i).array() -= lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
  return norm;
}

bool EarlyStopping::update(double validation_loss) {
  if (validation_loss < best_ - min_delta_) {
    best_ = validation_loss;
    stale_ = 0;
    improved_ = true;
  } else {
    ++stale_;
    improved_ = false;
  }
  return stale_ >= patience_;
}

int thread_count() {
  if (const char* env = std::getenv("LHG_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(thread_count()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace lhg::nn
