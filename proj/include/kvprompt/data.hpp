#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "kvprompt/tensor.hpp"

// Dataset ingestion (IDX, PGM + CSV manifest) and the synthetic
// source/target shift task used for desk-scale pretrain/finetune runs.

namespace kvp {

struct DatasetSplit {
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;  // size() * channels*height*width
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t image_bytes() const { return channels * height * width; }
    const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * image_bytes(); }

    DatasetSplit subset(const std::vector<std::size_t>& idx) const;
};

struct Dataset {
    DatasetSplit train, val, test;
    std::size_t num_classes = 0;
    std::vector<std::string> class_names;
    // Per-channel normalization fit on the train split, on the [0,1] scale.
    std::vector<double> channel_mean, channel_std;
};

// IDX (big-endian): images magic 0x00000803 with dims n x rows x cols,
// labels magic 0x00000801 with dim n. Parse errors carry byte offsets.
DatasetSplit load_idx(const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path);
void write_idx(const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path, const DatasetSplit& split);

// Binary PGM (P5), maxval <= 255.
std::vector<std::uint8_t> load_pgm(const std::filesystem::path& path, std::size_t& w,
                                   std::size_t& h);
void write_pgm(const std::filesystem::path& path, std::size_t w, std::size_t h,
               const std::uint8_t* data);

// CSV manifest of `path,label` rows (optional literal header); paths are
// resolved relative to the manifest location. All images must share
// dimensions.
DatasetSplit load_manifest(const std::filesystem::path& csv_path);

DatasetSplit resize_nearest(const DatasetSplit& s, std::size_t out_hw);

// Stratified 80/20 split (the 800-200 rule, proportional for smaller
// splits), deterministic by seed. A class with a single example goes to the
// train side.
std::pair<DatasetSplit, DatasetSplit> split_800_200(const DatasetSplit& s, std::uint64_t seed);

// Fits channel_mean / channel_std on the train split.
void fit_normalization(Dataset& d);

// Synthetic 16x16 grayscale task pair: source and target draw from disjoint
// shape families, and the target flips polarity and raises pixel noise, so
// a frozen source backbone transfers poorly without adaptation.
std::pair<Dataset, Dataset> make_shift_task(std::uint64_t seed, std::size_t n_classes,
                                            std::size_t n_per_class);

// Normalized model input for one example: shape {channels, h, w}.
template <class T>
TensorPtr<T> image_input(const DatasetSplit& s, std::size_t i, const std::vector<double>& mean,
                         const std::vector<double>& stddev) {
    auto t = make_tensor<T>({s.channels, s.height, s.width});
    const std::uint8_t* src = s.image(i);
    const std::size_t hw = s.height * s.width;
    for (std::size_t c = 0; c < s.channels; ++c) {
        const double mu = mean.at(c), sd = stddev.at(c);
        for (std::size_t p = 0; p < hw; ++p) {
            t->data[c * hw + p] =
                static_cast<T>((static_cast<double>(src[c * hw + p]) / 255.0 - mu) / sd);
        }
    }
    return t;
}

}  // namespace kvp
