#pragma once

// Plain-loop decoder forward for one sequence. Shares no code with the
// autograd ops so it can serve as an oracle for them.

#include "iconlab/transformer.hpp"

#include <cmath>
#include <vector>

namespace testref {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const iconlab::Tensor& t) {
    Mat m(static_cast<std::size_t>(t.rows()), std::vector<double>(static_cast<std::size_t>(t.cols())));
    for (std::int64_t r = 0; r < t.rows(); ++r) {
        for (std::int64_t c = 0; c < t.cols(); ++c) {
            m[r][c] = t(r, c);
        }
    }
    return m;
}

inline std::vector<double> to_vec(const iconlab::Tensor& t) { return t.to_vector(); }

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t k = 0; k < b.size(); ++k) {
            for (std::size_t j = 0; j < b[0].size(); ++j) {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    return out;
}

inline void add_bias(Mat& m, const std::vector<double>& b) {
    for (auto& row : m) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] += b[j];
        }
    }
}

inline Mat layer_norm(const Mat& x, const std::vector<double>& g, const std::vector<double>& b, double eps) {
    Mat out = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double mu = 0.0;
        for (double v : x[i]) mu += v;
        mu /= static_cast<double>(x[i].size());
        double var = 0.0;
        for (double v : x[i]) var += (v - mu) * (v - mu);
        var /= static_cast<double>(x[i].size());
        for (std::size_t j = 0; j < x[i].size(); ++j) {
            out[i][j] = (x[i][j] - mu) / std::sqrt(var + eps) * g[j] + b[j];
        }
    }
    return out;
}

inline Mat forward(const iconlab::ModelParams& p, const iconlab::Tensor& tokens) {
    const auto& w = p.weights;
    const auto& c = p.config;
    const std::size_t n = static_cast<std::size_t>(tokens.rows());
    Mat h = matmul(to_mat(tokens), to_mat(w.embed_w));
    add_bias(h, to_vec(w.embed_b));
    const Mat pos = to_mat(w.pos_embed);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < h[i].size(); ++j) h[i][j] += pos[i][j];
    }
    const std::size_t d = static_cast<std::size_t>(c.d_model);
    const std::size_t dh = d / static_cast<std::size_t>(c.n_heads);
    for (const auto& b : w.blocks) {
        Mat a = layer_norm(h, to_vec(b.ln1_g), to_vec(b.ln1_b), c.ln_eps);
        Mat q = matmul(a, to_mat(b.wq));
        Mat k = matmul(a, to_mat(b.wk));
        Mat v = matmul(a, to_mat(b.wv));
        Mat att(n, std::vector<double>(d, 0.0));
        for (std::size_t hd = 0; hd < static_cast<std::size_t>(c.n_heads); ++hd) {
            const std::size_t o = hd * dh;
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> s(i + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= i; ++j) {
                    double dot = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) dot += q[i][o + e] * k[j][o + e];
                    s[j] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (auto& x : s) {
                    x = std::exp(x - mx);
                    z += x;
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    for (std::size_t e = 0; e < dh; ++e) att[i][o + e] += s[j] / z * v[j][o + e];
                }
            }
        }
        Mat proj = matmul(att, to_mat(b.wo));
        add_bias(proj, to_vec(b.bo));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) h[i][j] += proj[i][j];
        Mat f = layer_norm(h, to_vec(b.ln2_g), to_vec(b.ln2_b), c.ln_eps);
        f = matmul(f, to_mat(b.w1));
        add_bias(f, to_vec(b.b1));
        for (auto& row : f)
            for (auto& x : row) x = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
        f = matmul(f, to_mat(b.w2));
        add_bias(f, to_vec(b.b2));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) h[i][j] += f[i][j];
    }
    h = layer_norm(h, to_vec(w.lnf_g), to_vec(w.lnf_b), c.ln_eps);
    Mat out = matmul(h, to_mat(w.head_w));
    add_bias(out, to_vec(w.head_b));
    return out;
}

}  // namespace testref
