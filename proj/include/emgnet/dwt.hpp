#ifndef EMGNET_DWT_HPP
#define EMGNET_DWT_HPP

#include <cstddef>
#include <string>
#include <vector>

namespace emgnet {

enum class WaveletFamily { Haar, Db7 };

// Border handling for the cascade. Symmetric (half-sample) extension is the
// default for feature extraction; periodic extension keeps the transform
// orthogonal on exact-length inputs, which the energy tests rely on.
enum class DwtBoundary { Symmetric, Periodic };

struct WaveletSpec {
    WaveletFamily family = WaveletFamily::Db7;
    std::size_t decomposition_levels = 3;
    DwtBoundary boundary = DwtBoundary::Symmetric;
};

WaveletFamily wavelet_family_from_string(const std::string& name);
std::string to_string(WaveletFamily family);

// Decomposition (analysis) filters, low-pass and high-pass.
const std::vector<double>& wavelet_dec_lo(WaveletFamily family);
const std::vector<double>& wavelet_dec_hi(WaveletFamily family);

// Minimum signal length for a full decomposition: filter_length * 2^(levels-1).
std::size_t dwt_min_signal_length(const WaveletSpec& spec);

struct DwtCoeffs {
    // details[l] holds the level l+1 detail coefficients.
    std::vector<std::vector<double>> details;
    std::vector<double> approximation;
};

DwtCoeffs dwt_decompose(const std::vector<double>& signal, const WaveletSpec& spec);

// Per-channel blocks of (levels + 1) marginals, each the sum of absolute
// coefficient values of one band, ordered [detail L1, ..., detail Ln, approx Ln].
struct FeatureVector {
    std::size_t channels = 0;
    std::size_t levels = 0;
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
};

// samples is row-major time x channels.
FeatureVector mdwt_features(const std::vector<double>& samples, std::size_t n_channels,
                            const WaveletSpec& spec);

// Column header names for the feature CSV layout, e.g. ch0_d1 ... ch0_a3, ch1_d1 ...
std::vector<std::string> mdwt_feature_names(std::size_t n_channels, std::size_t levels);

} // namespace emgnet

#endif
