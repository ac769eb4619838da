// SPDX-License-Identifier: Apache-2.0
#pragma once

// Independent 64-bit reference implementations. Nothing here calls the
// library's kernels; parameters are read through the public visitors only.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "ccoe/model.hpp"
#include "ccoe/routing.hpp"

namespace ccoe::oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t m = a.size(), k = b.size(), n = b.empty() ? 0 : b[0].size();
  Mat c(m, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i][p] * b[p][j];
      c[i][j] = s;
    }
  return c;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> y(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += (y[i] = std::exp(x[i] - mx));
  for (double& v : y) v /= sum;
  return y;
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<double>& g,
                                      const std::vector<double>& b, double eps) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + eps) * g[i] + b[i];
  return y;
}

inline double gelu(double x) {
  const double c = std::sqrt(2.0 / 3.14159265358979323846);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

/// Causal multi-head attention by explicit loops over positions and heads.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads) {
  const std::size_t t = q.size(), d = q[0].size(), hd = d / heads;
  Mat out(t, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> s(i + 1);
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < hd; ++c) acc += q[i][h * hd + c] * k[j][h * hd + c];
        s[j] = acc / std::sqrt(static_cast<double>(hd));
      }
      const auto p = softmax(s);
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t c = 0; c < hd; ++c) out[i][h * hd + c] += p[j] * v[j][h * hd + c];
    }
  return out;
}

/// Every parameter as doubles, keyed "bb.<name>", "ex.<name>" or "pl.<name>".
struct Params {
  std::map<std::string, std::vector<double>> values;
  std::map<std::string, std::vector<std::size_t>> shapes;

  void add(const std::string& name, const Tensor& t) {
    values[name].assign(t.values().begin(), t.values().end());
    shapes[name] = t.shape().dims();
  }
  const std::vector<double>& vec(const std::string& name) const { return values.at(name); }
  Mat mat(const std::string& name) const {
    const auto& s = shapes.at(name);
    const auto& v = values.at(name);
    Mat m(s[0], std::vector<double>(s[1]));
    for (std::size_t i = 0; i < s[0]; ++i)
      for (std::size_t j = 0; j < s[1]; ++j) m[i][j] = v[i * s[1] + j];
    return m;
  }
};

inline Params collect(const BackboneModel& model, const ExpertSubnetwork* expert,
                      const PlannerExpert* planner = nullptr) {
  Params p;
  model.visit_params([&](const std::string& n, const Tensor& t) { p.add("bb." + n, t); });
  if (expert) ExpertSubnetwork::visit(*expert, [&](const std::string& n, const Tensor& t) { p.add("ex." + n, t); });
  if (planner) PlannerExpert::visit(*planner, [&](const std::string& n, const Tensor& t) { p.add("pl." + n, t); });
  return p;
}

/// Prefix of the FFN parameters used at each layer.
inline std::vector<std::string> ffn_sources(const ModelConfig& cfg,
                                            const std::vector<std::size_t>& positions,
                                            const std::string& expert_prefix) {
  std::vector<std::string> src(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) src[l] = "bb.layers." + std::to_string(l) + ".ffn.";
  for (std::size_t i = 0; i < positions.size(); ++i)
    src[positions[i]] = expert_prefix + "layers." + std::to_string(i) + ".";
  return src;
}

inline Mat affine(const Mat& x, const Params& p, const std::string& w, const std::string& b) {
  Mat y = matmul(x, p.mat(w));
  const auto& bias = p.vec(b);
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  return y;
}

/// Final normed hidden states [t, d].
inline Mat hidden(const Params& p, const ModelConfig& cfg, const std::vector<std::string>& ffn,
                  const std::vector<TokenId>& tokens) {
  const std::size_t t = tokens.size(), d = cfg.d_model;
  const auto& te = p.vec("bb.token_embedding");
  const auto& pe = p.vec("bb.pos_embedding");
  Mat x(t, std::vector<double>(d));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t c = 0; c < d; ++c)
      x[i][c] = te[static_cast<std::size_t>(tokens[i]) * d + c] + pe[i * d + c];
  const double eps = 1e-5;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string a = "bb.layers." + std::to_string(l) + ".attn.";
    Mat n1(t);
    for (std::size_t i = 0; i < t; ++i)
      n1[i] = layer_norm(x[i], p.vec(a + "norm_gain"), p.vec(a + "norm_bias"), eps);
    const Mat ctx = attention(affine(n1, p, a + "w_q", a + "b_q"), affine(n1, p, a + "w_k", a + "b_k"),
                              affine(n1, p, a + "w_v", a + "b_v"), cfg.n_heads);
    const Mat o = affine(ctx, p, a + "w_o", a + "b_o");
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < d; ++c) x[i][c] += o[i][c];
    const std::string& f = ffn[l];
    Mat n2(t);
    for (std::size_t i = 0; i < t; ++i)
      n2[i] = layer_norm(x[i], p.vec(f + "norm_gain"), p.vec(f + "norm_bias"), eps);
    Mat h = affine(n2, p, f + "w_in", f + "b_in");
    for (auto& row : h)
      for (double& v : row) v = gelu(v);
    const Mat y = affine(h, p, f + "w_out", f + "b_out");
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < d; ++c) x[i][c] += y[i][c];
  }
  Mat out(t);
  for (std::size_t i = 0; i < t; ++i)
    out[i] = layer_norm(x[i], p.vec("bb.final_gain"), p.vec("bb.final_bias"), eps);
  return out;
}

inline Mat logits(const Params& p, const ModelConfig& cfg, const std::vector<std::string>& ffn,
                  const std::vector<TokenId>& tokens) {
  return affine(hidden(p, cfg, ffn, tokens), p, "bb.head", "bb.head_bias");
}

/// Mean NLL over positions with mask 1, one sequence at a time.
inline double loss(const Params& p, const ModelConfig& cfg, const std::vector<std::string>& ffn,
                   const std::vector<std::vector<TokenId>>& inputs,
                   const std::vector<std::vector<TokenId>>& targets,
                   const std::vector<std::vector<int>>& mask) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const Mat z = logits(p, cfg, ffn, inputs[s]);
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (!mask[s][i]) continue;
      const double mx = *std::max_element(z[i].begin(), z[i].end());
      double sum = 0.0;
      for (double v : z[i]) sum += std::exp(v - mx);
      total += mx + std::log(sum) - z[i][static_cast<std::size_t>(targets[s][i])];
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

/// Planner scores for one sequence: single-head cross-attention from each
/// indicator row onto the hidden states, then the scalar head.
inline std::vector<double> planner_scores(const Params& p, const ModelConfig& cfg,
                                          const std::vector<std::string>& ffn,
                                          const std::vector<TokenId>& tokens) {
  const Mat h = hidden(p, cfg, ffn, tokens);
  const Mat q = matmul(p.mat("pl.indicators"), p.mat("pl.scorer.w_q"));
  const Mat k = matmul(h, p.mat("pl.scorer.w_k"));
  const Mat v = matmul(h, p.mat("pl.scorer.w_v"));
  const auto& fw = p.vec("pl.scorer.f_w");
  const double fb = p.vec("pl.scorer.f_b")[0];
  const double d = static_cast<double>(cfg.d_model);
  std::vector<double> out;
  for (const auto& qr : q) {
    std::vector<double> s(k.size());
    for (std::size_t j = 0; j < k.size(); ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < qr.size(); ++c) acc += qr[c] * k[j][c];
      s[j] = acc / std::sqrt(d);
    }
    const auto a = softmax(s);
    double score = fb;
    for (std::size_t c = 0; c < qr.size(); ++c) {
      double ctx = 0.0;
      for (std::size_t j = 0; j < v.size(); ++j) ctx += a[j] * v[j][c];
      score += fw[c] * ctx;
    }
    out.push_back(score);
  }
  return out;
}

}  // namespace ccoe::oracle
