#include "kvprompt/diag.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <utility>

#include "kvprompt/errors.hpp"

namespace kvp {

namespace {

double norm2(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
}

void check_finite(const std::vector<double>& x, const char* what) {
    for (double v : x) {
        if (!std::isfinite(v)) throw NumericError(std::string(what) + " contains a non-finite value");
    }
}

std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void EmbeddingSet::validate() const {
    if (vectors.size() != labels.size()) {
        throw ShapeError("embedding set has " + std::to_string(vectors.size()) + " vectors but " +
                         std::to_string(labels.size()) + " labels");
    }
    if (vectors.empty()) throw ConfigError("embedding set is empty");
    const std::size_t d = vectors[0].size();
    if (d == 0) throw ShapeError("embedding vectors must have dimension >= 1");
    for (const auto& row : vectors) {
        if (row.size() != d) throw ShapeError("embedding rows have mixed dimensions");
        check_finite(row, "embedding");
    }
}

std::vector<double> poincare_project(const std::vector<double>& x, double curvature) {
    if (!(curvature > 0.0)) throw ConfigError("curvature must be positive");
    check_finite(x, "projection input");
    const double sc = std::sqrt(curvature);
    const double n = std::sqrt(norm2(x));
    std::vector<double> y(x.size(), 0.0);
    if (n == 0.0) return y;
    // tanh rounds to 1.0 for arguments beyond ~19, so clamp the radial factor
    // strictly inside the ball of radius 1/sqrt(c).
    const double radial = std::min(std::tanh(sc * n), 1.0 - 1e-12) / sc;
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / n * radial;
    return y;
}

double poincare_distance(const std::vector<double>& u, const std::vector<double>& v,
                         double curvature) {
    if (!(curvature > 0.0)) throw ConfigError("curvature must be positive");
    if (u.size() != v.size()) throw ShapeError("distance between vectors of different dimension");
    check_finite(u, "distance input");
    check_finite(v, "distance input");
    const double cu = 1.0 - curvature * norm2(u);
    const double cv = 1.0 - curvature * norm2(v);
    if (cu <= 0.0 || cv <= 0.0) throw NumericError("point lies outside the Poincaré ball");
    double duv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) duv += (u[i] - v[i]) * (u[i] - v[i]);
    const double arg = std::max(1.0, 1.0 + 2.0 * curvature * duv / (cu * cv));
    return std::acosh(arg) / std::sqrt(curvature);
}

RecallResult recall_at_k(const EmbeddingSet& e, std::size_t k, Metric metric, double curvature) {
    e.validate();
    const std::size_t n = e.size();
    if (n < 2) throw ConfigError("recall@k needs at least two samples");
    if (k == 0) throw ConfigError("recall@k needs k >= 1");
    if (k >= n) {
        throw ConfigError("k = " + std::to_string(k) + " must be below the sample count " +
                          std::to_string(n));
    }

    const std::vector<std::vector<double>>* pts = &e.vectors;
    std::vector<std::vector<double>> ball;
    if (metric == Metric::Poincare) {
        ball.reserve(n);
        for (const auto& row : e.vectors) ball.push_back(poincare_project(row, curvature));
        pts = &ball;
    }

    std::vector<std::size_t> label_count;
    for (int l : e.labels) {
        if (l < 0) throw ConfigError("labels must be non-negative");
        if (static_cast<std::size_t>(l) >= label_count.size()) label_count.resize(l + 1, 0);
        ++label_count[l];
    }

    RecallResult out;
    std::size_t hits = 0;
    std::vector<std::pair<double, std::size_t>> order(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        if (label_count[e.labels[i]] < 2) {
            ++out.skipped;
            continue;
        }
        std::size_t w = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double d;
            if (metric == Metric::Euclidean) {
                d = 0.0;
                for (std::size_t t = 0; t < (*pts)[i].size(); ++t) {
                    const double diff = (*pts)[i][t] - (*pts)[j][t];
                    d += diff * diff;
                }
            } else {
                d = poincare_distance((*pts)[i], (*pts)[j], curvature);
            }
            order[w++] = {d, j};
        }
        std::partial_sort(order.begin(), order.begin() + k, order.end());
        bool hit = false;
        for (std::size_t t = 0; t < k && !hit; ++t) hit = e.labels[order[t].second] == e.labels[i];
        hits += hit;
        ++out.queried;
    }
    if (out.queried == 0) throw ConfigError("every sample has a singleton label");
    out.recall = static_cast<double>(hits) / static_cast<double>(out.queried);
    return out;
}

namespace {

// Cyclic Jacobi diagonalization of a symmetric matrix. Returns eigenvalues on
// the diagonal of `a` with eigenvectors as columns of `v`.
void jacobi_eigen(std::vector<std::vector<double>>& a, std::vector<std::vector<double>>& v) {
    const std::size_t d = a.size();
    v.assign(d, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < d; ++i) v[i][i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-24) return;
        for (std::size_t p = 0; p < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                if (a[p][q] == 0.0) continue;
                const double tau = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t i = 0; i < d; ++i) {
                    const double aip = a[i][p], aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    const double api = a[p][i], aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    const double vip = v[i][p], viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
}

}  // namespace

std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<double>>& vectors) {
    if (vectors.empty()) throw ConfigError("pca_2d needs at least one vector");
    const std::size_t n = vectors.size(), d = vectors[0].size();
    if (d == 0) throw ShapeError("pca_2d needs dimension >= 1");
    for (const auto& row : vectors) {
        if (row.size() != d) throw ShapeError("pca_2d rows have mixed dimensions");
        check_finite(row, "pca input");
    }

    std::vector<double> mean(d, 0.0);
    for (const auto& row : vectors)
        for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
    for (double& m : mean) m /= static_cast<double>(n);

    std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
    for (const auto& row : vectors)
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = i; j < d; ++j)
                cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]);
    const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) cov[j][i] = cov[i][j] /= denom;

    std::vector<std::vector<double>> evec;
    jacobi_eigen(cov, evec);
    std::vector<std::size_t> idx(d);
    for (std::size_t i = 0; i < d; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return cov[a][a] > cov[b][b]; });

    std::vector<std::array<double, 2>> axes(2, {0.0, 0.0});
    std::vector<std::vector<double>> basis(2, std::vector<double>(d, 0.0));
    for (std::size_t k = 0; k < 2 && k < d; ++k) {
        for (std::size_t i = 0; i < d; ++i) basis[k][i] = evec[i][idx[k]];
        // Deterministic sign: the largest-magnitude component points up.
        std::size_t top = 0;
        for (std::size_t i = 1; i < d; ++i)
            if (std::abs(basis[k][i]) > std::abs(basis[k][top])) top = i;
        if (basis[k][top] < 0.0)
            for (double& b : basis[k]) b = -b;
    }

    std::vector<std::array<double, 2>> out(n, {0.0, 0.0});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < 2 && k < d; ++k) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += (vectors[r][i] - mean[i]) * basis[k][i];
            out[r][k] = s;
        }
    return out;
}

DiskProjection project_to_disk(const EmbeddingSet& e, double curvature) {
    e.validate();
    DiskProjection p;
    p.labels = e.labels;
    p.source = e.source;
    p.curvature = curvature;
    for (const auto& xy : pca_2d(e.vectors)) {
        const auto b = poincare_project({xy[0], xy[1]}, curvature);
        p.points.push_back({b[0], b[1]});
    }
    return p;
}

BorderStats border_stats(const DiskProjection& p) {
    if (p.points.empty()) throw ConfigError("border stats of an empty projection");
    const double sc = std::sqrt(p.curvature);
    BorderStats s;
    s.min = 2.0;
    s.max = -1.0;
    for (const auto& pt : p.points) {
        const double gap = 1.0 - sc * std::sqrt(pt[0] * pt[0] + pt[1] * pt[1]);
        s.mean += gap;
        s.min = std::min(s.min, gap);
        s.max = std::max(s.max, gap);
    }
    s.mean /= static_cast<double>(p.points.size());
    return s;
}

void write_embedding_csv(const std::filesystem::path& path, const DiskProjection& p) {
    if (p.points.size() != p.labels.size()) throw ShapeError("projection points/labels mismatch");
    const auto stats = border_stats(p);
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write " + path.string());
    f << "# projection: pca-2d + poincare exponential map (substitute for nonlinear reduction);"
      << " curvature=" << fmt_g17(p.curvature) << "; border-distance mean=" << fmt_g17(stats.mean)
      << " min=" << fmt_g17(stats.min) << " max=" << fmt_g17(stats.max) << "\n";
    f << "x,y,label,source\n";
    for (std::size_t i = 0; i < p.points.size(); ++i) {
        f << fmt_g17(p.points[i][0]) << ',' << fmt_g17(p.points[i][1]) << ',' << p.labels[i] << ','
          << p.source << "\n";
    }
}

void write_embedding_svg(const std::filesystem::path& path, const DiskProjection& p) {
    if (p.points.size() != p.labels.size()) throw ShapeError("projection points/labels mismatch");
    static const char* palette[10] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd",
                                      "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write " + path.string());
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"640\" "
         "viewBox=\"-1.15 -1.15 2.3 2.3\">\n";
    f << "  <desc>" << p.source << " embeddings on the Poincaré disk (curvature "
      << fmt_g17(p.curvature) << ")</desc>\n";
    f << "  <circle cx=\"0\" cy=\"0\" r=\"1\" fill=\"none\" stroke=\"#333333\" "
         "stroke-width=\"0.01\"/>\n";
    const double scale = std::sqrt(p.curvature);  // draw in unit-disk coordinates
    for (std::size_t i = 0; i < p.points.size(); ++i) {
        const int l = p.labels[i] < 0 ? 0 : p.labels[i];
        f << "  <circle cx=\"" << fmt_g17(p.points[i][0] * scale) << "\" cy=\""
          << fmt_g17(-p.points[i][1] * scale) << "\" r=\"0.02\" fill=\"" << palette[l % 10]
          << "\" fill-opacity=\"0.85\"/>\n";
    }
    f << "</svg>\n";
}

}  // namespace kvp
