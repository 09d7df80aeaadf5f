#include "emgnet/dwt.hpp"

#include <cmath>
#include <cstddef>

#include "emgnet/errors.hpp"

namespace emgnet {

namespace {

// Daubechies-7 scaling (reconstruction low-pass) coefficients, normalized so
// the sum is sqrt(2). The analysis filter is its time reverse.
const double kDb7RecLo[14] = {
    0.07785205408506236,   0.39653931948230575,  0.7291320908465551,
    0.4697822874053586,    -0.14390600392910627, -0.22403618499416572,
    0.07130921926705004,   0.0806126091510659,   -0.03802993693503463,
    -0.016574541631015562, 0.012550998556013784, 0.00042957797300470274,
    -0.0018016407039998328, 0.0003537138000010399,
};

std::vector<double> make_dec_lo(WaveletFamily family) {
    if (family == WaveletFamily::Haar) {
        const double s = 1.0 / std::sqrt(2.0);
        return {s, s};
    }
    std::vector<double> lo(14);
    for (std::size_t k = 0; k < 14; ++k) lo[k] = kDb7RecLo[13 - k];
    return lo;
}

std::vector<double> make_dec_hi(const std::vector<double>& lo) {
    const std::size_t n = lo.size();
    std::vector<double> hi(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double v = lo[n - 1 - k];
        hi[k] = (k % 2 == 0) ? v : -v;
    }
    return hi;
}

// Half-sample symmetric index folding: ... x1 x0 | x0 x1 ... xn-1 | xn-1 xn-2 ...
std::size_t sym_index(std::ptrdiff_t i, std::size_t n) {
    const std::ptrdiff_t sn = static_cast<std::ptrdiff_t>(n);
    while (i < 0 || i >= sn) {
        if (i < 0) i = -1 - i;
        if (i >= sn) i = 2 * sn - 1 - i;
    }
    return static_cast<std::size_t>(i);
}

// One analysis step: correlate with the filter under the chosen boundary
// rule and keep every second output.
std::vector<double> analysis_step(const std::vector<double>& x, const std::vector<double>& f,
                                  DwtBoundary boundary) {
    const std::size_t n = x.size();
    const std::size_t L = f.size();
    std::vector<double> out;
    if (boundary == DwtBoundary::Periodic) {
        out.resize((n + 1) / 2);
        for (std::size_t j = 0; j < out.size(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < L; ++k) acc += f[k] * x[(2 * j + k) % n];
            out[j] = acc;
        }
    } else {
        out.resize((n + L - 1) / 2);
        const std::ptrdiff_t base = 1 - static_cast<std::ptrdiff_t>(L - 1);
        for (std::size_t j = 0; j < out.size(); ++j) {
            double acc = 0.0;
            const std::ptrdiff_t start = base + static_cast<std::ptrdiff_t>(2 * j);
            for (std::size_t k = 0; k < L; ++k) {
                acc += f[k] * x[sym_index(start + static_cast<std::ptrdiff_t>(k), n)];
            }
            out[j] = acc;
        }
    }
    return out;
}

} // namespace

WaveletFamily wavelet_family_from_string(const std::string& name) {
    if (name == "haar") return WaveletFamily::Haar;
    if (name == "db7") return WaveletFamily::Db7;
    throw UsageError("unknown wavelet family '" + name + "' (expected haar or db7)");
}

std::string to_string(WaveletFamily family) {
    return family == WaveletFamily::Haar ? "haar" : "db7";
}

const std::vector<double>& wavelet_dec_lo(WaveletFamily family) {
    static const std::vector<double> haar = make_dec_lo(WaveletFamily::Haar);
    static const std::vector<double> db7 = make_dec_lo(WaveletFamily::Db7);
    return family == WaveletFamily::Haar ? haar : db7;
}

const std::vector<double>& wavelet_dec_hi(WaveletFamily family) {
    static const std::vector<double> haar = make_dec_hi(wavelet_dec_lo(WaveletFamily::Haar));
    static const std::vector<double> db7 = make_dec_hi(wavelet_dec_lo(WaveletFamily::Db7));
    return family == WaveletFamily::Haar ? haar : db7;
}

std::size_t dwt_min_signal_length(const WaveletSpec& spec) {
    const std::size_t L = wavelet_dec_lo(spec.family).size();
    return L << (spec.decomposition_levels - 1);
}

DwtCoeffs dwt_decompose(const std::vector<double>& signal, const WaveletSpec& spec) {
    if (spec.decomposition_levels < 1) {
        throw UsageError("dwt_decompose: decomposition_levels must be >= 1");
    }
    const std::size_t min_len = dwt_min_signal_length(spec);
    if (signal.size() < min_len) {
        throw UsageError("dwt_decompose: signal length " + std::to_string(signal.size()) +
                         " below minimum " + std::to_string(min_len) + " for " +
                         to_string(spec.family) + " at " +
                         std::to_string(spec.decomposition_levels) + " levels");
    }
    const auto& lo = wavelet_dec_lo(spec.family);
    const auto& hi = wavelet_dec_hi(spec.family);

    DwtCoeffs coeffs;
    std::vector<double> approx = signal;
    for (std::size_t level = 0; level < spec.decomposition_levels; ++level) {
        coeffs.details.push_back(analysis_step(approx, hi, spec.boundary));
        approx = analysis_step(approx, lo, spec.boundary);
    }
    coeffs.approximation = std::move(approx);
    return coeffs;
}

FeatureVector mdwt_features(const std::vector<double>& samples, std::size_t n_channels,
                            const WaveletSpec& spec) {
    if (n_channels == 0 || samples.size() % n_channels != 0) {
        throw ShapeError("mdwt_features: sample matrix size " + std::to_string(samples.size()) +
                         " is not a multiple of channel count " + std::to_string(n_channels));
    }
    const std::size_t n_samples = samples.size() / n_channels;

    FeatureVector fv;
    fv.channels = n_channels;
    fv.levels = spec.decomposition_levels;
    fv.values.reserve(n_channels * (spec.decomposition_levels + 1));

    std::vector<double> channel(n_samples);
    for (std::size_t c = 0; c < n_channels; ++c) {
        for (std::size_t t = 0; t < n_samples; ++t) channel[t] = samples[t * n_channels + c];
        const DwtCoeffs coeffs = dwt_decompose(channel, spec);
        for (const auto& band : coeffs.details) {
            double marginal = 0.0;
            for (double v : band) marginal += std::abs(v);
            fv.values.push_back(marginal);
        }
        double marginal = 0.0;
        for (double v : coeffs.approximation) marginal += std::abs(v);
        fv.values.push_back(marginal);
    }
    return fv;
}

std::vector<std::string> mdwt_feature_names(std::size_t n_channels, std::size_t levels) {
    std::vector<std::string> names;
    names.reserve(n_channels * (levels + 1));
    for (std::size_t c = 0; c < n_channels; ++c) {
        for (std::size_t l = 1; l <= levels; ++l) {
            names.push_back("ch" + std::to_string(c) + "_d" + std::to_string(l));
        }
        names.push_back("ch" + std::to_string(c) + "_a" + std::to_string(levels));
    }
    return names;
}

} // namespace emgnet
