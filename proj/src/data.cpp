#include "unet3p/data.hpp"

#include <algorithm>
#include <cmath>

namespace unet3p {

void SyntheticDatasetSpec::validate() const {
    if (image_size < 1) throw ConfigError("image_size must be >= 1");
    if (count < 0) throw ConfigError("count must be >= 0");
    if (organ_fraction < 0.0 || organ_fraction > 1.0) {
        throw ConfigError("organ_fraction must be in [0,1]");
    }
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
}

namespace {

struct Ellipse {
    double cx, cy;       // center, pixels
    double rx, ry;       // radii, pixels
    double cos_t, sin_t; // rotation
    double intensity;
};

// normalized ellipse coordinate: q <= 1 is inside
double ellipse_q(const Ellipse& e, double x, double y) {
    const double dx = x - e.cx, dy = y - e.cy;
    const double u = (dx * e.cos_t + dy * e.sin_t) / e.rx;
    const double v = (-dx * e.sin_t + dy * e.cos_t) / e.ry;
    return std::sqrt(u * u + v * v);
}

constexpr double kBackground = 0.1;

}  // namespace

Sample generate(const SyntheticDatasetSpec& spec, int index) {
    spec.validate();
    if (index < 0 || index >= spec.count) {
        throw ContractError("sample index " + std::to_string(index) + " out of range [0," +
                            std::to_string(spec.count) + ")");
    }
    const int S = spec.image_size;
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));

    const int organ_count = static_cast<int>(std::llround(spec.organ_fraction * spec.count));
    Sample sample;
    sample.has_organ = index < organ_count;

    std::vector<double> plane(static_cast<std::size_t>(S) * S, kBackground);
    std::vector<double> mask(static_cast<std::size_t>(S) * S, 0.0);

    if (sample.has_organ) {
        const int n_ellipses = 1 + static_cast<int>(rng.uniform_int(3));  // 1..3
        std::vector<Ellipse> shapes;
        for (int e = 0; e < n_ellipses; ++e) {
            Ellipse el;
            el.cx = rng.uniform(0.28, 0.72) * S;
            el.cy = rng.uniform(0.28, 0.72) * S;
            el.rx = std::max(3.0, rng.uniform(0.08, 0.22) * S);
            el.ry = std::max(3.0, rng.uniform(0.08, 0.22) * S);
            const double theta = rng.uniform(0.0, 3.14159265358979323846);
            el.cos_t = std::cos(theta);
            el.sin_t = std::sin(theta);
            el.intensity = rng.uniform(0.55, 0.9);
            shapes.push_back(el);
        }
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                double best = 0.0;
                bool inside = false;
                for (const auto& el : shapes) {
                    const double q = ellipse_q(el, x + 0.5, y + 0.5);
                    if (q <= 1.0) inside = true;
                    // soft shoulder straddling the mask boundary
                    double shape = 0.0;
                    if (q <= 0.85) {
                        shape = 1.0;
                    } else if (q < 1.15) {
                        shape = (1.15 - q) / 0.3;
                    }
                    best = std::max(best, el.intensity * shape);
                }
                const std::size_t i = static_cast<std::size_t>(y) * S + x;
                plane[i] += best;
                if (inside) mask[i] = 1.0;
            }
        }
    }

    for (double& v : plane) {
        v += spec.noise_sigma * rng.normal();
        v = std::min(1.0, std::max(0.0, v));
    }

    std::vector<double> chans(plane.size() * 3);
    for (int c = 0; c < 3; ++c) {
        std::copy(plane.begin(), plane.end(), chans.begin() + static_cast<std::ptrdiff_t>(c * plane.size()));
    }
    sample.image = Tensor::from_data({3, S, S}, std::move(chans));
    sample.mask = Tensor::from_data({1, S, S}, std::move(mask));
    return sample;
}

std::vector<Sample> generate_all(const SyntheticDatasetSpec& spec) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(spec.count));
    for (int i = 0; i < spec.count; ++i) out.push_back(generate(spec, i));
    return out;
}

double dice(const Tensor& pred, const Tensor& mask, double threshold) {
    if (pred.shape != mask.shape) {
        throw ShapeError("dice: shape mismatch " + shape_str(pred.shape) + " vs " +
                         shape_str(mask.shape));
    }
    std::int64_t p_count = 0, g_count = 0, inter = 0;
    const std::size_t n = pred.data.size();
    for (std::size_t i = 0; i < n; ++i) {
        const bool p = pred.data[i] >= threshold;
        const bool g = mask.data[i] >= 0.5;
        p_count += p;
        g_count += g;
        inter += (p && g);
    }
    if (p_count + g_count == 0) return 1.0;  // both empty: perfect agreement
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p_count + g_count);
}

std::int64_t false_positive_pixels(const Tensor& pred, const Tensor& mask, double threshold) {
    if (pred.shape != mask.shape) {
        throw ShapeError("false_positive_pixels: shape mismatch");
    }
    std::int64_t fp = 0;
    const std::size_t n = pred.data.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (pred.data[i] >= threshold && mask.data[i] < 0.5) ++fp;
    }
    return fp;
}

}  // namespace unet3p
