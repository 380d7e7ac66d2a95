// Haze synthesis via the atmospheric scattering model
//   I = J * T + A * (1 - T),  T = exp(-beta * D)
// plus synthetic depth maps, multi-intensity series, quantile intensity
// binning, and paired-dataset generation with a scene-level split.

#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>

#include "dehaze/imageio.hpp"
#include "dehaze/prior.hpp"
#include "dehaze/rng.hpp"
#include "dehaze/tensor.hpp"

namespace dehaze {

template <typename T>
struct HazeScene {
    Tensor<T> clean;                   // (1,3,H,W) in [0,1]
    Tensor<T> depth;                   // (1,1,H,W), nonnegative relative depth
    double beta = 0;                   // scattering coefficient
    std::array<double, 3> airlight{};  // per-channel atmospheric light in [0,1]

    void validate() const {
        if (clean.rank() != 4 || clean.dim(1) != 3)
            throw ShapeError("HazeScene: clean image must be (1,3,H,W)");
        if (depth.rank() != 4 || depth.dim(1) != 1 || depth.dim(2) != clean.dim(2) ||
            depth.dim(3) != clean.dim(3))
            throw ShapeError("HazeScene: depth must be (1,1,H,W) congruent with clean");
        if (beta < 0) throw ParamError("HazeScene: beta must be nonnegative");
        for (const T& v : clean.data())
            if (v < T(0) || v > T(1))
                throw ParamError("HazeScene: clean image values must lie in [0,1]");
        for (const T& v : depth.data())
            if (v < T(0)) throw ParamError("HazeScene: depth must be nonnegative");
        for (double a : airlight)
            if (a < 0 || a > 1)
                throw ParamError("HazeScene: atmospheric light must lie in [0,1]");
    }
};

template <typename T>
Tensor<T> synthesize(const HazeScene<T>& scene) {
    scene.validate();
    const std::int64_t M = scene.clean.dim(2) * scene.clean.dim(3);
    Tensor<T> out(scene.clean.shape());
    for (std::int64_t i = 0; i < M; ++i) {
        const double t = std::exp(-scene.beta * static_cast<double>(scene.depth[i]));
        for (std::int64_t c = 0; c < 3; ++c) {
            const double v = static_cast<double>(scene.clean[c * M + i]) * t +
                             scene.airlight[static_cast<std::size_t>(c)] * (1.0 - t);
            // A convex combination of in-range values; the clamp is a no-op
            // when the scene invariants hold.
            out[c * M + i] = static_cast<T>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

template <typename T>
double mean_transmission(const Tensor<T>& depth, double beta) {
    double acc = 0;
    for (std::int64_t i = 0; i < depth.numel(); ++i)
        acc += std::exp(-beta * static_cast<double>(depth[i]));
    return acc / static_cast<double>(depth.numel());
}

enum class DepthKind { LinearRamp, Radial, FromFile };

// linear-ramp rises top-to-bottom from d_min to d_max; radial rises from the
// center outward; from-file rescales a 16-bit grayscale PNG to [d_min, d_max].
template <typename T>
Tensor<T> depth_map(DepthKind kind, std::int64_t height, std::int64_t width,
                    double d_min, double d_max, const std::string& file = "") {
    if (height < 1 || width < 1) throw ParamError("depth_map: dims must be positive");
    if (d_min >= d_max) throw ParamError("depth_map: require d_min < d_max");
    if (kind == DepthKind::FromFile)
        return depth_to_tensor<T>(read_png_gray16(file), d_min, d_max);
    Tensor<T> d(Shape{1, 1, height, width});
    if (kind == DepthKind::LinearRamp) {
        for (std::int64_t i = 0; i < height; ++i) {
            const double f = height > 1 ? static_cast<double>(i) / (height - 1) : 0.0;
            for (std::int64_t j = 0; j < width; ++j)
                d[i * width + j] = static_cast<T>(d_min + (d_max - d_min) * f);
        }
    } else {
        const double ci = (height - 1) / 2.0, cj = (width - 1) / 2.0;
        const double rmax = std::sqrt(ci * ci + cj * cj);
        for (std::int64_t i = 0; i < height; ++i)
            for (std::int64_t j = 0; j < width; ++j) {
                const double r = std::sqrt((i - ci) * (i - ci) + (j - cj) * (j - cj));
                const double f = rmax > 0 ? r / rmax : 0.0;
                d[i * width + j] = static_cast<T>(d_min + (d_max - d_min) * f);
            }
    }
    return d;
}

// Default 8-step beta grid: log-spaced so mean transmission over a [0,1]
// depth ramp spans roughly [0.95, 0.15] (light to dense).
inline std::vector<double> default_beta_grid(std::int64_t n = 8, double beta_min = 0.105,
                                             double beta_max = 6.6) {
    if (n < 1) throw ParamError("default_beta_grid: need at least one beta");
    std::vector<double> betas;
    for (std::int64_t i = 0; i < n; ++i) {
        const double f = n > 1 ? static_cast<double>(i) / (n - 1) : 0.0;
        betas.push_back(beta_min * std::pow(beta_max / beta_min, f));
    }
    return betas;
}

// One synthesize output per beta, ordered light to dense.
template <typename T>
std::vector<Tensor<T>> intensity_series(const Tensor<T>& clean, const Tensor<T>& depth,
                                        const std::array<double, 3>& airlight,
                                        const std::vector<double>& betas) {
    for (std::size_t i = 0; i < betas.size(); ++i) {
        if (betas[i] < 0) throw ParamError("intensity_series: betas must be nonnegative");
        if (i > 0 && betas[i] <= betas[i - 1])
            throw ParamError("intensity_series: betas must be strictly increasing");
    }
    std::vector<Tensor<T>> out;
    for (double beta : betas) {
        HazeScene<T> scene{clean, depth, beta, airlight};
        out.push_back(synthesize(scene));
    }
    return out;
}

enum class IntensityBin { Light, Medium, Dense };

inline const char* to_string(IntensityBin b) {
    switch (b) {
        case IntensityBin::Light: return "light";
        case IntensityBin::Medium: return "medium";
        case IntensityBin::Dense: return "dense";
    }
    return "?";
}

inline IntensityBin bin_from_string(const std::string& s) {
    if (s == "light") return IntensityBin::Light;
    if (s == "medium") return IntensityBin::Medium;
    if (s == "dense") return IntensityBin::Dense;
    throw ParamError("unknown intensity bin '" + s + "'");
}

// Rank-based quantile binning: the lowest round(n*q1) scores are light, the
// highest n - round(n*q2) are dense, the rest medium. Ties resolve by index
// order, so bin sizes match the configured proportions to within rounding.
inline std::vector<IntensityBin> bin_by_intensity(const std::vector<double>& scores,
                                                  double q1, double q2) {
    if (!(q1 > 0 && q1 < q2 && q2 < 1))
        throw ParamError("bin_by_intensity: require 0 < q1 < q2 < 1");
    const std::int64_t n = static_cast<std::int64_t>(scores.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
    });
    const std::int64_t k1 = std::llround(static_cast<double>(n) * q1);
    const std::int64_t k2 = std::llround(static_cast<double>(n) * q2);
    std::vector<IntensityBin> bins(static_cast<std::size_t>(n), IntensityBin::Medium);
    for (std::int64_t r = 0; r < n; ++r) {
        const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(r)]);
        bins[idx] = r < k1 ? IntensityBin::Light
                           : (r < k2 ? IntensityBin::Medium : IntensityBin::Dense);
    }
    return bins;
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

struct DatasetConfig {
    std::string input_dir;  // clean images; empty -> procedural scenes
    std::string out_dir;
    std::int64_t scenes = 8;  // procedural scene count
    std::int64_t size = 64;   // procedural scene side length
    std::int64_t num_betas = 8;
    double beta_min = 0.105;
    double beta_max = 6.6;
    DepthKind depth_kind = DepthKind::LinearRamp;
    double d_min = 0.0;
    double d_max = 1.0;
    double airlight_min = 0.7;
    double airlight_max = 1.0;
    double train_frac = 0.8;
    double q1 = 0.183;
    double q2 = 0.817;
    int dark_window = 7;
    std::uint64_t seed = 0;
};

struct ManifestEntry {
    std::string scene_id;
    std::string clean_path;
    std::string hazy_path;
    double beta = 0;
    IntensityBin bin = IntensityBin::Medium;
    std::string split;  // "train" | "test"
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::vector<std::string> errors;  // "path: message" for undecodable inputs

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw ParamError("Manifest: cannot write " + path);
        out << "# scene_id, clean_path, hazy_path, beta, bin, split\n";
        out << std::setprecision(12);
        for (const auto& e : entries)
            out << e.scene_id << ", " << e.clean_path << ", " << e.hazy_path << ", "
                << e.beta << ", " << to_string(e.bin) << ", " << e.split << "\n";
        for (const auto& err : errors) out << "error, " << err << "\n";
    }

    static Manifest load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ParamError("Manifest: cannot open " + path);
        Manifest m;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty() || line[0] == '#') continue;
            std::vector<std::string> fields;
            std::size_t start = 0;
            while (true) {
                const auto comma = line.find(',', start);
                std::string f = comma == std::string::npos
                                    ? line.substr(start)
                                    : line.substr(start, comma - start);
                const auto a = f.find_first_not_of(" \t");
                const auto b = f.find_last_not_of(" \t\r");
                fields.push_back(a == std::string::npos ? std::string()
                                                        : f.substr(a, b - a + 1));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
            if (!fields.empty() && fields[0] == "error") {
                m.errors.push_back(line.substr(line.find(',') + 2));
                continue;
            }
            if (fields.size() != 6)
                throw ParamError("Manifest: malformed line '" + line + "'");
            ManifestEntry e;
            e.scene_id = fields[0];
            e.clean_path = fields[1];
            e.hazy_path = fields[2];
            e.beta = std::stod(fields[3]);
            e.bin = bin_from_string(fields[4]);
            e.split = fields[5];
            m.entries.push_back(std::move(e));
        }
        return m;
    }
};

// Procedural clean scene: smooth color gradient plus random rectangles and
// disks, deterministic per (seed, scene id).
template <typename T>
Tensor<T> procedural_scene(std::int64_t height, std::int64_t width, Rng rng) {
    Tensor<T> img(Shape{1, 3, height, width});
    const std::int64_t M = height * width;
    std::array<double, 3> c0{}, c1{}, c2{};
    for (int c = 0; c < 3; ++c) {
        c0[static_cast<std::size_t>(c)] = rng.uniform(0.0, 0.6);
        c1[static_cast<std::size_t>(c)] = rng.uniform(0.0, 0.6);
        c2[static_cast<std::size_t>(c)] = rng.uniform(0.0, 0.6);
    }
    for (std::int64_t i = 0; i < height; ++i)
        for (std::int64_t j = 0; j < width; ++j) {
            const double fi = static_cast<double>(i) / std::max<std::int64_t>(height - 1, 1);
            const double fj = static_cast<double>(j) / std::max<std::int64_t>(width - 1, 1);
            for (std::int64_t c = 0; c < 3; ++c)
                img[c * M + i * width + j] = static_cast<T>(
                    c0[static_cast<std::size_t>(c)] +
                    (c1[static_cast<std::size_t>(c)] - c0[static_cast<std::size_t>(c)]) * fi +
                    (c2[static_cast<std::size_t>(c)] - c0[static_cast<std::size_t>(c)]) * fj);
        }
    const std::int64_t n_shapes = 4 + static_cast<std::int64_t>(rng.uniform_index(5));
    for (std::int64_t s = 0; s < n_shapes; ++s) {
        std::array<double, 3> col{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0),
                                  rng.uniform(0.0, 1.0)};
        const bool disk = rng.uniform() < 0.5;
        const std::int64_t ci = static_cast<std::int64_t>(rng.uniform_index(
            static_cast<std::uint64_t>(height)));
        const std::int64_t cj = static_cast<std::int64_t>(rng.uniform_index(
            static_cast<std::uint64_t>(width)));
        const std::int64_t r = 2 + static_cast<std::int64_t>(rng.uniform_index(
            static_cast<std::uint64_t>(std::max<std::int64_t>(height / 4, 3))));
        for (std::int64_t i = std::max<std::int64_t>(0, ci - r);
             i <= std::min(height - 1, ci + r); ++i)
            for (std::int64_t j = std::max<std::int64_t>(0, cj - r);
                 j <= std::min(width - 1, cj + r); ++j) {
                if (disk && (i - ci) * (i - ci) + (j - cj) * (j - cj) > r * r) continue;
                for (std::int64_t c = 0; c < 3; ++c)
                    img[c * M + i * width + j] =
                        static_cast<T>(col[static_cast<std::size_t>(c)]);
            }
    }
    // Soften shape edges with a separable box blur so the scenes are
    // band-limited; hard edges make restoration targets needlessly aliased.
    for (int pass = 0; pass < 2; ++pass) {
        const std::int64_t r = 2;
        std::vector<T> row(static_cast<std::size_t>(std::max(height, width)));
        for (std::int64_t c = 0; c < 3; ++c) {
            for (std::int64_t i = 0; i < height; ++i) {
                for (std::int64_t j = 0; j < width; ++j) {
                    double acc = 0;
                    std::int64_t n = 0;
                    for (std::int64_t k = std::max<std::int64_t>(0, j - r);
                         k <= std::min(width - 1, j + r); ++k, ++n)
                        acc += img[c * M + i * width + k];
                    row[static_cast<std::size_t>(j)] = static_cast<T>(acc / n);
                }
                for (std::int64_t j = 0; j < width; ++j)
                    img[c * M + i * width + j] = row[static_cast<std::size_t>(j)];
            }
            for (std::int64_t j = 0; j < width; ++j) {
                for (std::int64_t i = 0; i < height; ++i) {
                    double acc = 0;
                    std::int64_t n = 0;
                    for (std::int64_t k = std::max<std::int64_t>(0, i - r);
                         k <= std::min(height - 1, i + r); ++k, ++n)
                        acc += img[c * M + k * width + j];
                    row[static_cast<std::size_t>(i)] = static_cast<T>(acc / n);
                }
                for (std::int64_t i = 0; i < height; ++i)
                    img[c * M + i * width + j] = row[static_cast<std::size_t>(i)];
            }
        }
    }
    // Keep scenes at moderate contrast: full-range content saturates against
    // the airlight term at high haze density and clips at the display range,
    // so compress values toward mid-gray before the final clamp.
    for (std::int64_t i = 0; i < img.numel(); ++i)
        img[i] = static_cast<T>(0.5 + 0.40 * (static_cast<double>(img[i]) - 0.5));
    for (std::int64_t i = 0; i < img.numel(); ++i)
        img[i] = std::clamp(img[i], T(0), T(1));
    return img;
}

// Generate the paired dataset: per scene a depth map, an 8-step intensity
// series, dark-channel intensity bins, and a deterministic scene-level
// train/test split (no scene appears in both splits).
template <typename T>
Manifest make_dataset(const DatasetConfig& cfg) {
    namespace fs = std::filesystem;
    if (cfg.out_dir.empty()) throw ParamError("make_dataset: out_dir required");
    fs::create_directories(cfg.out_dir);
    Rng root(cfg.seed);

    struct SceneInput {
        std::string id;
        Tensor<T> clean;
    };
    std::vector<SceneInput> scenes;
    Manifest manifest;
    if (!cfg.input_dir.empty()) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(cfg.input_dir)) {
            if (!entry.is_regular_file()) continue;
            const auto ext = entry.path().extension().string();
            if (ext == ".png" || ext == ".ppm") files.push_back(entry.path().string());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            try {
                scenes.push_back({fs::path(f).stem().string(),
                                  to_tensor<T>(read_image(f))});
            } catch (const std::exception& e) {
                manifest.errors.push_back(f + ": " + e.what());
            }
        }
        if (scenes.empty() && manifest.errors.empty())
            throw ParamError("make_dataset: no readable images in " + cfg.input_dir);
    } else {
        for (std::int64_t s = 0; s < cfg.scenes; ++s)
            scenes.push_back({"scene_" + std::to_string(s),
                              procedural_scene<T>(cfg.size, cfg.size,
                                                  root.derive(static_cast<std::uint64_t>(s)))});
    }

    // Scene-level split: deterministic shuffle, first train_frac are train.
    const std::int64_t n_scenes = static_cast<std::int64_t>(scenes.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n_scenes));
    for (std::int64_t i = 0; i < n_scenes; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng split_rng = root.derive(0x9e3779b9u);
    for (std::int64_t i = n_scenes - 1; i > 0; --i)
        std::swap(order[static_cast<std::size_t>(i)],
                  order[split_rng.uniform_index(static_cast<std::uint64_t>(i + 1))]);
    const std::int64_t n_train =
        static_cast<std::int64_t>(std::floor(cfg.train_frac * n_scenes));
    std::vector<std::string> split(static_cast<std::size_t>(n_scenes));
    for (std::int64_t r = 0; r < n_scenes; ++r)
        split[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] =
            r < n_train ? "train" : "test";

    const auto betas = default_beta_grid(cfg.num_betas, cfg.beta_min, cfg.beta_max);
    std::vector<double> scores;
    std::vector<ManifestEntry> entries;
    for (std::int64_t s = 0; s < n_scenes; ++s) {
        auto& scene = scenes[static_cast<std::size_t>(s)];
        Rng srng = root.derive(0x1000 + static_cast<std::uint64_t>(s));
        const fs::path dir = fs::path(cfg.out_dir) / scene.id;
        fs::create_directories(dir);
        const std::int64_t H = scene.clean.dim(2), W = scene.clean.dim(3);
        Tensor<T> depth = depth_map<T>(cfg.depth_kind, H, W, cfg.d_min, cfg.d_max);
        const double a = srng.uniform(cfg.airlight_min, cfg.airlight_max);
        const std::array<double, 3> airlight{a, a, a};
        const std::string clean_path = (dir / "clean.png").string();
        write_png(clean_path, from_tensor(scene.clean));
        write_png_gray16((dir / "depth.png").string(),
                         depth_from_tensor(depth, cfg.d_min, cfg.d_max));
        const auto series = intensity_series(scene.clean, depth, airlight, betas);
        for (std::size_t k = 0; k < series.size(); ++k) {
            const std::string hazy_path =
                (dir / ("hazy_" + std::to_string(k) + ".png")).string();
            write_png(hazy_path, from_tensor(series[k]));
            scores.push_back(dark_channel_score(series[k], 0, cfg.dark_window));
            ManifestEntry e;
            e.scene_id = scene.id;
            e.clean_path = clean_path;
            e.hazy_path = hazy_path;
            e.beta = betas[k];
            e.split = split[static_cast<std::size_t>(s)];
            entries.push_back(std::move(e));
        }
    }
    const auto bins = bin_by_intensity(scores, cfg.q1, cfg.q2);
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].bin = bins[i];
    manifest.entries = std::move(entries);
    manifest.save((fs::path(cfg.out_dir) / "manifest.txt").string());
    return manifest;
}

}  // namespace dehaze
