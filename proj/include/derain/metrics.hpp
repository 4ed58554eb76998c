#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "derain/common.hpp"
#include "derain/image.hpp"
#include "derain/tensor.hpp"

namespace derain {

// SSIM constants: 11x11 Gaussian window, sigma 1.5, C1=(0.01L)^2,
// C2=(0.03L)^2 with dynamic range L=1.
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 1e-4;
inline constexpr double kSsimC2 = 9e-4;

struct KlParams {
    int bins = 64;
    double epsilon = 1e-8;
};

namespace detail {

template <typename T>
Tensor<T> ssim_window(int channels) {
    std::vector<T> taps(kSsimWindow * kSsimWindow);
    double total = 0;
    for (int y = 0; y < kSsimWindow; ++y)
        for (int x = 0; x < kSsimWindow; ++x) {
            const double dy = y - (kSsimWindow - 1) / 2.0;
            const double dx = x - (kSsimWindow - 1) / 2.0;
            const double w = std::exp(-(dx * dx + dy * dy) / (2 * kSsimSigma * kSsimSigma));
            taps[y * kSsimWindow + x] = static_cast<T>(w);
            total += w;
        }
    for (auto& t : taps) t = static_cast<T>(t / total);
    std::vector<T> all;
    all.reserve(taps.size() * channels);
    for (int c = 0; c < channels; ++c) all.insert(all.end(), taps.begin(), taps.end());
    return Tensor<T>::from_vector({channels, 1, kSsimWindow, kSsimWindow}, std::move(all));
}

// Windowed local mean via depthwise convolution over valid positions.
template <typename T>
Tensor<T> local_mean(const Tensor<T>& x, const Tensor<T>& window) {
    return conv2d<T>(x, window, nullptr, 1, 0, x.shape().c);
}

}  // namespace detail

// Mean local SSIM over all valid window positions and channels;
// differentiable with respect to both inputs.
template <typename T>
Tensor<T> ssim(const Tensor<T>& x, const Tensor<T>& y) {
    if (!(x.shape() == y.shape()))
        fail("shape-mismatch", "ssim inputs " + x.shape().str() + " vs " + y.shape().str());
    if (x.shape().h < kSsimWindow || x.shape().w < kSsimWindow)
        fail("bad-dimension", "ssim needs at least " + std::to_string(kSsimWindow) + "x" +
                                  std::to_string(kSsimWindow) + " images, got " +
                                  x.shape().str());
    Tensor<T> w = detail::ssim_window<T>(x.shape().c);
    Tensor<T> mx = detail::local_mean(x, w);
    Tensor<T> my = detail::local_mean(y, w);
    Tensor<T> mxx = mul(mx, mx);
    Tensor<T> myy = mul(my, my);
    Tensor<T> mxy = mul(mx, my);
    Tensor<T> vx = sub(detail::local_mean(mul(x, x), w), mxx);
    Tensor<T> vy = sub(detail::local_mean(mul(y, y), w), myy);
    Tensor<T> cxy = sub(detail::local_mean(mul(x, y), w), mxy);

    Tensor<T> num = mul(add_scalar(scalar_mul(mxy, 2.0), kSsimC1),
                        add_scalar(scalar_mul(cxy, 2.0), kSsimC2));
    Tensor<T> den =
        mul(add_scalar(add(mxx, myy), kSsimC1), add_scalar(add(vx, vy), kSsimC2));
    return mean_all(div(num, den));
}

inline double psnr(const Image& x, const Image& y) {
    if (x.channels != y.channels || x.height != y.height || x.width != y.width)
        fail("shape-mismatch", "psnr inputs differ in size");
    double mse = 0;
    for (size_t i = 0; i < x.pix.size(); ++i) {
        const double d = static_cast<double>(x.pix[i]) - y.pix[i];
        mse += d * d;
    }
    mse /= x.pix.size();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

inline double ssim_value(const Image& x, const Image& y) {
    return ssim(image_to_tensor<double>(x), image_to_tensor<double>(y)).item();
}

// KL(P||Q) between epsilon-smoothed normalized intensity histograms of
// two rain maps; soft triangular binning keeps it differentiable.
template <typename T>
Tensor<T> kl_histogram(const Tensor<T>& r1, const Tensor<T>& r2, const KlParams& params = {}) {
    if (params.bins < 2) fail("bad-config", "kl_histogram needs at least 2 bins");
    if (params.epsilon <= 0) fail("bad-config", "kl_histogram epsilon must be positive");
    auto normalized = [&](const Tensor<T>& r) {
        Tensor<T> h = add_scalar(soft_histogram(r, params.bins), params.epsilon);
        return div(h, sum_all(h));
    };
    Tensor<T> p = normalized(r1);
    Tensor<T> q = normalized(r2);
    return sum_all(mul(p, sub(log(p), log(q))));
}

// Sum of per-output SSIM penalties; outputs and weights must pair up.
template <typename T>
Tensor<T> loss_collaborative(const std::vector<Tensor<T>>& b_hats, const Tensor<T>& b,
                             const std::vector<double>& alphas) {
    if (b_hats.empty()) fail("bad-config", "loss_collaborative needs at least one output");
    if (b_hats.size() != alphas.size())
        fail("bad-config", "loss_collaborative got " + std::to_string(b_hats.size()) +
                               " outputs but " + std::to_string(alphas.size()) + " weights");
    Tensor<T> total = scalar_mul(ssim(b_hats[0], b), -alphas[0]);
    for (size_t i = 1; i < b_hats.size(); ++i)
        total = add(total, scalar_mul(ssim(b_hats[i], b), -alphas[i]));
    return total;
}

namespace detail {

template <typename T>
Tensor<T> mean_of(const std::vector<Tensor<T>>& xs) {
    Tensor<T> acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return scalar_mul(acc, 1.0 / static_cast<double>(xs.size()));
}

}  // namespace detail

// Scale-constraint loss: predictions at each scale are mean-combined and
// scored against the pyramid target once per scale. Either list may be
// empty, dropping that scale's term (the half target is the signed band
// already mapped to [0,1]; the quarter target is the Gaussian top).
template <typename T>
Tensor<T> loss_mscc(const std::vector<Tensor<T>>& half_preds,
                    const std::vector<Tensor<T>>& quarter_preds,
                    const Tensor<T>& half_target, const Tensor<T>& quarter_target,
                    double beta1, double beta2) {
    Tensor<T> total = Tensor<T>::scalar(T(0));
    if (!half_preds.empty())
        total = add(total, scalar_mul(ssim(detail::mean_of(half_preds), half_target), -beta1));
    if (!quarter_preds.empty())
        total = add(total,
                    scalar_mul(ssim(detail::mean_of(quarter_preds), quarter_target), -beta2));
    return total;
}

// Signed band values in [-1,1] mapped affinely into SSIM's [0,1] range.
template <typename T>
Tensor<T> band_to_unit(const Image& band) {
    std::vector<T> v(band.pix.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>((band.pix[i] + 1.0f) * 0.5f);
    return Tensor<T>::from_vector({1, band.channels, band.height, band.width}, std::move(v));
}

template <typename T>
Tensor<T> loss_mscc(const std::vector<Tensor<T>>& half_preds,
                    const std::vector<Tensor<T>>& quarter_preds, const LaplacianPyramid& pyr,
                    double beta1, double beta2) {
    return loss_mscc(half_preds, quarter_preds, band_to_unit<T>(pyr.band_half),
                     image_to_tensor<T>(pyr.top_quarter), beta1, beta2);
}

template <typename T>
Tensor<T> loss_synthetic(const std::vector<Tensor<T>>& b_hats, const Tensor<T>& b,
                         const std::vector<double>& alphas,
                         const std::vector<Tensor<T>>& half_preds,
                         const std::vector<Tensor<T>>& quarter_preds,
                         const Tensor<T>& half_target, const Tensor<T>& quarter_target,
                         double beta1, double beta2) {
    Tensor<T> total = loss_collaborative(b_hats, b, alphas);
    if (!half_preds.empty() || !quarter_preds.empty())
        total = add(total, loss_mscc(half_preds, quarter_preds, half_target, quarter_target,
                                     beta1, beta2));
    return total;
}

// Real-world loss: mean-L1 drift from the pseudo label plus lambda-weighted
// KL between the current rain estimate and another image's past estimate.
template <typename T>
Tensor<T> loss_real(const Tensor<T>& b_k, const Tensor<T>& b_km1, const Tensor<T>& r_k,
                    const Tensor<T>& r_random_km1, double lambda,
                    const KlParams& params = {}) {
    Tensor<T> content = mean_all(abs(sub(b_k, b_km1)));
    if (lambda == 0.0) return content;
    return add(content, scalar_mul(kl_histogram(r_k, r_random_km1, params), lambda));
}

}  // namespace derain
