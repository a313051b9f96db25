#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

// Embedding-space diagnostics: exponential-map projection onto the Poincaré
// ball, hyperbolic/euclidean Recall@K, and a PCA-to-2D disk scatter export.
// The 2-D reduction is a deliberate substitute for heavier nonlinear
// embeddings and is labelled as such in the exported metadata.

namespace kvp {

struct EmbeddingSet {
    std::vector<std::vector<double>> vectors;  // n rows, uniform dimension
    std::vector<int> labels;                   // n
    std::string source;                        // e.g. "visual-only", "kv+prune"

    std::size_t size() const { return vectors.size(); }
    std::size_t dim() const { return vectors.empty() ? 0 : vectors[0].size(); }
    void validate() const;  // uniform finite rows, matching label count
};

enum class Metric { Euclidean, Poincare };

// Exponential map at the origin of the curvature-c Poincaré ball:
//   y = tanh(sqrt(c)·|x|) · x / (sqrt(c)·|x|)
// The ball has radius 1/sqrt(c); the result is clamped strictly inside it
// (sqrt(c)·|y| <= 1 - 1e-12), so the default c = 1 yields |y| < 1 always.
std::vector<double> poincare_project(const std::vector<double>& x, double curvature = 1.0);

// Hyperbolic distance between two in-ball points:
//   d(u,v) = arcosh(1 + 2c|u-v|² / ((1-c|u|²)(1-c|v|²))) / sqrt(c)
double poincare_distance(const std::vector<double>& u, const std::vector<double>& v,
                         double curvature = 1.0);

struct RecallResult {
    double recall = 0.0;     // fraction of queried samples with a same-label hit
    std::size_t queried = 0;
    std::size_t skipped = 0;  // singleton-class samples excluded from the denominator
};

// Fraction of samples whose K nearest neighbours (self excluded, ties broken
// by (distance, index)) contain at least one same-label sample. With the
// Poincaré metric every vector is first mapped into the ball.
RecallResult recall_at_k(const EmbeddingSet& e, std::size_t k, Metric metric,
                         double curvature = 1.0);

// Principal-component projection to two dimensions (Jacobi eigensolver on the
// sample covariance). Coordinates are centered; eigenvector signs are fixed so
// repeated runs produce identical output.
std::vector<std::array<double, 2>> pca_2d(const std::vector<std::vector<double>>& vectors);

struct BorderStats {
    double mean = 0.0, min = 0.0, max = 0.0;  // of 1 - sqrt(c)·|point|
};

struct DiskProjection {
    std::vector<std::array<double, 2>> points;  // strictly inside the ball
    std::vector<int> labels;
    std::string source;
    double curvature = 1.0;
};

// PCA to 2-D followed by the exponential map, row by row.
DiskProjection project_to_disk(const EmbeddingSet& e, double curvature = 1.0);

BorderStats border_stats(const DiskProjection& p);

// CSV: one metadata comment line (projection recipe + border stats), then an
// `x,y,label,source` header and one row per point, printed with %.17g.
void write_embedding_csv(const std::filesystem::path& path, const DiskProjection& p);

// Standalone SVG scatter: unit-disk outline plus one dot per point, colored
// by label.
void write_embedding_svg(const std::filesystem::path& path, const DiskProjection& p);

}  // namespace kvp
