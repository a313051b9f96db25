#include "kvprompt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "kvprompt/errors.hpp"
#include "kvprompt/rng.hpp"

namespace kvp {

namespace {

std::string read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw ParseError("cannot open " + p.string());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// Big-endian u32 reader with offset-carrying errors.
std::uint32_t read_u32be(const std::string& buf, std::size_t& off, const std::string& what) {
    if (off + 4 > buf.size()) {
        throw ParseError("truncated " + what + " at byte offset " + std::to_string(off) +
                         " (file has " + std::to_string(buf.size()) + " bytes)");
    }
    const auto* b = reinterpret_cast<const unsigned char*>(buf.data() + off);
    off += 4;
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

void write_u32be(std::ofstream& f, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::string hex(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

}  // namespace

DatasetSplit DatasetSplit::subset(const std::vector<std::size_t>& idx) const {
    DatasetSplit out;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.pixels.reserve(idx.size() * image_bytes());
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) {
        const std::uint8_t* src = image(i);
        out.pixels.insert(out.pixels.end(), src, src + image_bytes());
        out.labels.push_back(labels[i]);
    }
    return out;
}

DatasetSplit load_idx(const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
    const std::string ibuf = read_file(images_path);
    std::size_t off = 0;
    const std::uint32_t imagic = read_u32be(ibuf, off, images_path.string() + " magic");
    if (imagic != kIdxImagesMagic) {
        throw ParseError(images_path.string() + ": bad image magic, expected " +
                         hex(kIdxImagesMagic) + " got " + hex(imagic) + " at byte offset 0");
    }
    const std::uint32_t n = read_u32be(ibuf, off, "image count");
    const std::uint32_t rows = read_u32be(ibuf, off, "image rows");
    const std::uint32_t cols = read_u32be(ibuf, off, "image cols");
    const std::size_t need = std::size_t(n) * rows * cols;
    if (ibuf.size() - off < need) {
        throw ParseError(images_path.string() + ": truncated pixel data at byte offset " +
                         std::to_string(ibuf.size()) + ", expected " +
                         std::to_string(off + need) + " bytes");
    }

    const std::string lbuf = read_file(labels_path);
    std::size_t loff = 0;
    const std::uint32_t lmagic = read_u32be(lbuf, loff, labels_path.string() + " magic");
    if (lmagic != kIdxLabelsMagic) {
        throw ParseError(labels_path.string() + ": bad label magic, expected " +
                         hex(kIdxLabelsMagic) + " got " + hex(lmagic) + " at byte offset 0");
    }
    const std::uint32_t ln = read_u32be(lbuf, loff, "label count");
    if (ln != n) {
        throw ParseError("image/label count mismatch: " + std::to_string(n) + " images vs " +
                         std::to_string(ln) + " labels");
    }
    if (lbuf.size() - loff < ln) {
        throw ParseError(labels_path.string() + ": truncated label data at byte offset " +
                         std::to_string(lbuf.size()) + ", expected " +
                         std::to_string(loff + ln) + " bytes");
    }

    DatasetSplit s;
    s.channels = 1;
    s.height = rows;
    s.width = cols;
    s.pixels.assign(ibuf.begin() + static_cast<std::ptrdiff_t>(off),
                    ibuf.begin() + static_cast<std::ptrdiff_t>(off + need));
    s.labels.resize(ln);
    for (std::uint32_t i = 0; i < ln; ++i)
        s.labels[i] = static_cast<unsigned char>(lbuf[loff + i]);
    return s;
}

void write_idx(const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path, const DatasetSplit& split) {
    if (split.channels != 1) throw ParseError("idx export supports single-channel images only");
    std::ofstream fi(images_path, std::ios::binary);
    if (!fi) throw ParseError("cannot write " + images_path.string());
    write_u32be(fi, kIdxImagesMagic);
    write_u32be(fi, static_cast<std::uint32_t>(split.size()));
    write_u32be(fi, static_cast<std::uint32_t>(split.height));
    write_u32be(fi, static_cast<std::uint32_t>(split.width));
    fi.write(reinterpret_cast<const char*>(split.pixels.data()),
             static_cast<std::streamsize>(split.pixels.size()));

    std::ofstream fl(labels_path, std::ios::binary);
    if (!fl) throw ParseError("cannot write " + labels_path.string());
    write_u32be(fl, kIdxLabelsMagic);
    write_u32be(fl, static_cast<std::uint32_t>(split.size()));
    for (int l : split.labels) fl.put(static_cast<char>(l));
}

namespace {

// Skips PGM whitespace and # comments; returns the next integer token.
std::size_t pgm_int(const std::string& buf, std::size_t& off, const std::string& path) {
    while (off < buf.size()) {
        const char c = buf[off];
        if (c == '#') {
            while (off < buf.size() && buf[off] != '\n') ++off;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            ++off;
        } else {
            break;
        }
    }
    if (off >= buf.size() || !std::isdigit(static_cast<unsigned char>(buf[off]))) {
        throw ParseError(path + ": expected integer in PGM header at byte offset " +
                         std::to_string(off));
    }
    std::size_t v = 0;
    while (off < buf.size() && std::isdigit(static_cast<unsigned char>(buf[off])))
        v = v * 10 + static_cast<std::size_t>(buf[off++] - '0');
    return v;
}

}  // namespace

std::vector<std::uint8_t> load_pgm(const std::filesystem::path& path, std::size_t& w,
                                   std::size_t& h) {
    const std::string buf = read_file(path);
    if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5') {
        throw ParseError(path.string() + ": not a binary PGM (P5) file");
    }
    std::size_t off = 2;
    w = pgm_int(buf, off, path.string());
    h = pgm_int(buf, off, path.string());
    const std::size_t maxval = pgm_int(buf, off, path.string());
    if (maxval == 0 || maxval > 255) {
        throw ParseError(path.string() + ": unsupported PGM maxval " + std::to_string(maxval));
    }
    ++off;  // single whitespace byte after maxval
    if (buf.size() - off < w * h) {
        throw ParseError(path.string() + ": truncated PGM payload at byte offset " +
                         std::to_string(buf.size()) + ", expected " + std::to_string(off + w * h));
    }
    return std::vector<std::uint8_t>(buf.begin() + static_cast<std::ptrdiff_t>(off),
                                     buf.begin() + static_cast<std::ptrdiff_t>(off + w * h));
}

void write_pgm(const std::filesystem::path& path, std::size_t w, std::size_t h,
               const std::uint8_t* data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot write " + path.string());
    f << "P5\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(w * h));
}

DatasetSplit load_manifest(const std::filesystem::path& csv_path) {
    std::ifstream f(csv_path);
    if (!f) throw ParseError("cannot open " + csv_path.string());
    const auto base = csv_path.parent_path();
    DatasetSplit s;
    std::string line;
    std::size_t lineno = 0;
    bool first = true;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (first && line == "path,label") {
            first = false;
            continue;
        }
        first = false;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) {
            throw ParseError(csv_path.string() + ":" + std::to_string(lineno) +
                             ": expected `path,label`");
        }
        const std::string rel = line.substr(0, comma);
        int label = 0;
        try {
            label = std::stoi(line.substr(comma + 1));
        } catch (const std::exception&) {
            throw ParseError(csv_path.string() + ":" + std::to_string(lineno) +
                             ": bad label `" + line.substr(comma + 1) + "`");
        }
        std::size_t w = 0, h = 0;
        auto px = load_pgm(base / rel, w, h);
        if (s.size() == 0) {
            s.width = w;
            s.height = h;
        } else if (w != s.width || h != s.height) {
            throw ParseError(csv_path.string() + ":" + std::to_string(lineno) + ": image size " +
                             std::to_string(w) + "x" + std::to_string(h) +
                             " differs from first image " + std::to_string(s.width) + "x" +
                             std::to_string(s.height));
        }
        s.pixels.insert(s.pixels.end(), px.begin(), px.end());
        s.labels.push_back(label);
    }
    return s;
}

DatasetSplit resize_nearest(const DatasetSplit& s, std::size_t out_hw) {
    if (s.height == out_hw && s.width == out_hw) return s;
    DatasetSplit out;
    out.channels = s.channels;
    out.height = out_hw;
    out.width = out_hw;
    out.labels = s.labels;
    out.pixels.resize(s.size() * out.image_bytes());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const std::uint8_t* src = s.image(i);
        std::uint8_t* dst = out.pixels.data() + i * out.image_bytes();
        for (std::size_t c = 0; c < s.channels; ++c)
            for (std::size_t y = 0; y < out_hw; ++y) {
                const std::size_t sy = y * s.height / out_hw;
                for (std::size_t x = 0; x < out_hw; ++x) {
                    const std::size_t sx = x * s.width / out_hw;
                    dst[(c * out_hw + y) * out_hw + x] =
                        src[(c * s.height + sy) * s.width + sx];
                }
            }
    }
    return out;
}

std::pair<DatasetSplit, DatasetSplit> split_800_200(const DatasetSplit& s, std::uint64_t seed) {
    if (s.size() < 2) throw ConfigError("split_800_200 needs at least 2 examples");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < s.size(); ++i) by_class[s.labels[i]].push_back(i);

    Rng root(seed);
    std::vector<std::size_t> train_idx, val_idx;
    for (auto& [label, idx] : by_class) {
        Rng r = root.fork(static_cast<std::uint64_t>(label));
        r.shuffle(idx);
        const std::size_t n_val = idx.size() / 5;  // single-example classes go to train
        for (std::size_t i = 0; i < idx.size(); ++i)
            (i < n_val ? val_idx : train_idx).push_back(idx[i]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    return {s.subset(train_idx), s.subset(val_idx)};
}

void fit_normalization(Dataset& d) {
    const auto& t = d.train;
    if (t.size() == 0) throw ConfigError("cannot fit normalization on an empty train split");
    d.channel_mean.assign(t.channels, 0.0);
    d.channel_std.assign(t.channels, 1.0);
    const std::size_t hw = t.height * t.width;
    for (std::size_t c = 0; c < t.channels; ++c) {
        double sum = 0, sumsq = 0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const std::uint8_t* img = t.image(i);
            for (std::size_t p = 0; p < hw; ++p) {
                const double v = static_cast<double>(img[c * hw + p]) / 255.0;
                sum += v;
                sumsq += v * v;
            }
        }
        const double n = static_cast<double>(t.size() * hw);
        const double mean = sum / n;
        const double var = std::max(sumsq / n - mean * mean, 1e-8);
        d.channel_mean[c] = mean;
        d.channel_std[c] = std::sqrt(var);
    }
}

namespace {

constexpr std::size_t kImg = 16;

using Canvas = std::array<double, kImg * kImg>;

void stamp(Canvas& c, std::size_t x, std::size_t y) {
    if (x < kImg && y < kImg) c[y * kImg + x] = 1.0;
}

// Shape painters draw a coverage mask into the canvas; jitter keeps
// within-class variation alive. Source and target families share no shapes.
void paint_shape(Canvas& c, std::size_t family, Rng& r) {
    c.fill(0.0);
    const auto ji = [&](std::size_t lo, std::size_t hi) {
        return lo + static_cast<std::size_t>(r.uniform_index(hi - lo + 1));
    };
    switch (family) {
        case 0: {  // filled disc
            const double cx = r.uniform(6.0, 10.0), cy = r.uniform(6.0, 10.0);
            const double rad = r.uniform(3.0, 5.0);
            for (std::size_t y = 0; y < kImg; ++y)
                for (std::size_t x = 0; x < kImg; ++x)
                    if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad) stamp(c, x, y);
            break;
        }
        case 1: {  // filled square
            const std::size_t side = ji(6, 9), x0 = ji(2, kImg - side - 2), y0 = ji(2, kImg - side - 2);
            for (std::size_t y = y0; y < y0 + side; ++y)
                for (std::size_t x = x0; x < x0 + side; ++x) stamp(c, x, y);
            break;
        }
        case 2: {  // horizontal stripes
            const std::size_t period = ji(3, 4), phase = ji(0, period - 1);
            for (std::size_t y = 0; y < kImg; ++y)
                if ((y + phase) % period < period / 2 + 1)
                    for (std::size_t x = 0; x < kImg; ++x) stamp(c, x, y);
            break;
        }
        case 3: {  // vertical stripes
            const std::size_t period = ji(3, 4), phase = ji(0, period - 1);
            for (std::size_t x = 0; x < kImg; ++x)
                if ((x + phase) % period < period / 2 + 1)
                    for (std::size_t y = 0; y < kImg; ++y) stamp(c, x, y);
            break;
        }
        case 4: {  // filled triangle, apex up
            const std::size_t h = ji(8, 11), y0 = ji(2, kImg - h - 1), cx = ji(6, 9);
            for (std::size_t dy = 0; dy < h; ++dy) {
                const std::size_t half = dy / 2 + 1;
                for (std::size_t x = cx > half ? cx - half : 0; x <= cx + half; ++x)
                    stamp(c, x, y0 + dy);
            }
            break;
        }
        case 5: {  // two small discs
            for (int k = 0; k < 2; ++k) {
                const double cx = r.uniform(3.5, 12.5), cy = k == 0 ? r.uniform(3.0, 6.0) : r.uniform(10.0, 13.0);
                const double rad = r.uniform(1.8, 2.8);
                for (std::size_t y = 0; y < kImg; ++y)
                    for (std::size_t x = 0; x < kImg; ++x)
                        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad) stamp(c, x, y);
            }
            break;
        }
        case 6: {  // ring
            const double cx = r.uniform(6.5, 9.5), cy = r.uniform(6.5, 9.5);
            const double ro = r.uniform(4.5, 6.0), ri = ro - r.uniform(1.8, 2.5);
            for (std::size_t y = 0; y < kImg; ++y)
                for (std::size_t x = 0; x < kImg; ++x) {
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    if (d2 <= ro * ro && d2 >= ri * ri) stamp(c, x, y);
                }
            break;
        }
        case 7: {  // diagonal band
            const std::size_t w = ji(2, 4);
            const int off = static_cast<int>(ji(0, 6)) - 3;
            for (std::size_t y = 0; y < kImg; ++y)
                for (std::size_t x = 0; x < kImg; ++x)
                    if (std::abs(static_cast<int>(x) - static_cast<int>(y) - off) <=
                        static_cast<int>(w))
                        stamp(c, x, y);
            break;
        }
        case 8: {  // hollow square frame
            const std::size_t side = ji(8, 11), x0 = ji(2, kImg - side - 2),
                              y0 = ji(2, kImg - side - 2), t = ji(1, 2);
            for (std::size_t y = y0; y < y0 + side; ++y)
                for (std::size_t x = x0; x < x0 + side; ++x)
                    if (y < y0 + t || y >= y0 + side - t || x < x0 + t || x >= x0 + side - t)
                        stamp(c, x, y);
            break;
        }
        case 9: {  // plus sign
            const std::size_t cx = ji(6, 9), cy = ji(6, 9), arm = ji(4, 6), t = ji(1, 2);
            for (std::size_t y = cy - arm; y <= cy + arm; ++y)
                for (std::size_t x = cx - t; x <= cx + t; ++x) stamp(c, x, y);
            for (std::size_t x = cx - arm; x <= cx + arm; ++x)
                for (std::size_t y = cy - t; y <= cy + t; ++y) stamp(c, x, y);
            break;
        }
        case 10: {  // checkerboard
            const std::size_t cell = ji(2, 4), phase = ji(0, 1);
            for (std::size_t y = 0; y < kImg; ++y)
                for (std::size_t x = 0; x < kImg; ++x)
                    if ((x / cell + y / cell + phase) % 2 == 0) stamp(c, x, y);
            break;
        }
        case 11: {  // anti-diagonal band
            const std::size_t w = ji(2, 4);
            const int off = static_cast<int>(ji(0, 6)) - 3;
            for (std::size_t y = 0; y < kImg; ++y)
                for (std::size_t x = 0; x < kImg; ++x)
                    if (std::abs(static_cast<int>(x + y) - 15 - off) <= static_cast<int>(w))
                        stamp(c, x, y);
            break;
        }
        case 12: {  // X (both diagonals)
            const std::size_t t = ji(1, 2);
            const int off = static_cast<int>(ji(0, 4)) - 2;
            for (std::size_t y = 0; y < kImg; ++y)
                for (std::size_t x = 0; x < kImg; ++x) {
                    const int xi = static_cast<int>(x), yi = static_cast<int>(y);
                    if (std::abs(xi - yi - off) <= static_cast<int>(t) ||
                        std::abs(xi + yi - 15 + off) <= static_cast<int>(t))
                        stamp(c, x, y);
                }
            break;
        }
        case 13: {  // single thick horizontal bar
            const std::size_t t = ji(2, 4), y0 = ji(3, kImg - t - 3);
            for (std::size_t y = y0; y < y0 + t; ++y)
                for (std::size_t x = 1; x < kImg - 1; ++x) stamp(c, x, y);
            break;
        }
        case 14: {  // dot grid
            const std::size_t step = ji(4, 5), phase = ji(1, 3);
            for (std::size_t y = phase; y < kImg; y += step)
                for (std::size_t x = phase; x < kImg; x += step) {
                    stamp(c, x, y);
                    stamp(c, x + 1, y);
                    stamp(c, x, y + 1);
                    stamp(c, x + 1, y + 1);
                }
            break;
        }
        default: {  // 15: L corner
            const std::size_t arm = ji(7, 10), t = ji(2, 3), x0 = ji(2, 4), y0 = ji(2, 4);
            for (std::size_t y = y0; y < y0 + arm; ++y)
                for (std::size_t x = x0; x < x0 + t; ++x) stamp(c, x, y);
            for (std::size_t x = x0; x < x0 + arm; ++x)
                for (std::size_t y = y0 + arm - t; y < y0 + arm; ++y) stamp(c, x, y);
            break;
        }
    }
}

void render_example(std::vector<std::uint8_t>& out, std::size_t family, bool invert,
                    double noise_sigma, Rng& r) {
    Canvas mask;
    paint_shape(mask, family, r);
    const double bg = invert ? r.uniform(200.0, 235.0) : r.uniform(20.0, 45.0);
    const double fg = invert ? r.uniform(30.0, 70.0) : r.uniform(185.0, 230.0);
    for (std::size_t p = 0; p < kImg * kImg; ++p) {
        double v = bg + (fg - bg) * mask[p] + r.normal(0.0, noise_sigma);
        v = std::min(255.0, std::max(0.0, v));
        out.push_back(static_cast<std::uint8_t>(std::lround(v)));
    }
}

DatasetSplit render_split(std::size_t n_classes, std::size_t n_per_class, std::size_t family_base,
                          bool invert, double noise_sigma, Rng stream) {
    DatasetSplit s;
    s.channels = 1;
    s.height = kImg;
    s.width = kImg;
    for (std::size_t cls = 0; cls < n_classes; ++cls)
        for (std::size_t i = 0; i < n_per_class; ++i) {
            Rng r = stream.fork(cls * 1000003 + i);
            render_example(s.pixels, family_base + cls, invert, noise_sigma, r);
            s.labels.push_back(static_cast<int>(cls));
        }
    return s;
}

const char* kFamilyNames[16] = {
    "disc",  "square", "hstripes", "vstripes", "triangle", "twodiscs", "ring",    "diagband",
    "frame", "plus",   "checker",  "antidiag", "xcross",   "hbar",     "dotgrid", "lcorner",
};

}  // namespace

std::pair<Dataset, Dataset> make_shift_task(std::uint64_t seed, std::size_t n_classes,
                                            std::size_t n_per_class) {
    if (n_classes == 0 || n_classes > 8) {
        throw ConfigError("shift task supports 1..8 classes, got " + std::to_string(n_classes));
    }
    if (n_per_class == 0) throw ConfigError("shift task needs n_per_class >= 1");
    Rng root(seed);
    const std::size_t n_eval = std::max<std::size_t>(2, n_per_class / 4);

    Dataset source, target;
    source.num_classes = n_classes;
    target.num_classes = n_classes;
    for (std::size_t c = 0; c < n_classes; ++c) {
        source.class_names.push_back(std::string("src_") + kFamilyNames[c]);
        target.class_names.push_back(std::string("tgt_") + kFamilyNames[8 + c]);
    }
    // Source: bright shapes on dark ground, mild noise.
    source.train = render_split(n_classes, n_per_class, 0, false, 8.0, root.fork(10));
    source.val = render_split(n_classes, n_eval, 0, false, 8.0, root.fork(11));
    source.test = render_split(n_classes, n_eval, 0, false, 8.0, root.fork(12));
    // Target: disjoint shape families, inverted polarity, heavier noise.
    target.train = render_split(n_classes, n_per_class, 8, true, 20.0, root.fork(20));
    target.val = render_split(n_classes, n_eval, 8, true, 20.0, root.fork(21));
    target.test = render_split(n_classes, n_eval, 8, true, 20.0, root.fork(22));
    fit_normalization(source);
    fit_normalization(target);
    return {std::move(source), std::move(target)};
}

}  // namespace kvp
