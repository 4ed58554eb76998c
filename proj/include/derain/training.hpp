#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "derain/checkpoint.hpp"
#include "derain/image.hpp"
#include "derain/network.hpp"
#include "derain/params.hpp"

namespace derain {

struct TrainConfig {
    double lr = 5e-4;
    int lr_drop1 = 300;
    int lr_drop2 = 400;
    double lr_drop_factor = 10.0;
    int epochs = 500;
    int batch = 4;
    int crop = 48;
    double alpha1 = 1.0, alpha2 = 1.0, alpha3 = 1.0;
    double beta1 = 0.05, beta2 = 0.001;
    double lambda = 1e-4;
    int epoch_real = 30;
    std::uint64_t seed = 0;
    bool freeze_companions_online = false;  // online updates touch only the B stream

    void validate() const {
        if (crop % 8 != 0 || crop < 24)
            fail("bad-config", "crop must be a multiple of 8 and at least 24");
        if (batch < 1) fail("bad-config", "batch must be >= 1");
        if (epochs < 0 || epoch_real < 0) fail("bad-config", "epoch counts must be >= 0");
        if (lr < 0 || lambda < 0 || alpha1 < 0 || alpha2 < 0 || alpha3 < 0 || beta1 < 0 ||
            beta2 < 0)
            fail("bad-config", "rates and loss weights must be >= 0");
        if (lr_drop_factor <= 0) fail("bad-config", "lr_drop_factor must be > 0");
    }
};

// Bias-corrected Adam. Moments live beside the parameter list in the same
// order; they are created lazily on the first step.
template <typename T>
struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long long step = 0;
    std::vector<std::vector<T>> m, v;
};

template <typename T>
void adam_step(const std::vector<ParamPtr<T>>& params,
               const std::vector<std::vector<T>>& grads, AdamState<T>& st, double lr,
               const std::vector<char>* trainable = nullptr) {
    if (grads.size() != params.size())
        fail("shape-mismatch", "adam_step got " + std::to_string(grads.size()) +
                                   " gradients for " + std::to_string(params.size()) +
                                   " parameters");
    if (st.m.empty()) {
        st.m.resize(params.size());
        st.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            st.m[i].assign(params[i]->value->size(), T(0));
            st.v[i].assign(params[i]->value->size(), T(0));
        }
    }
    st.step += 1;
    const double corr1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double corr2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < params.size(); ++i) {
        if (trainable && !(*trainable)[i]) continue;
        auto& value = *params[i]->value;
        if (grads[i].size() != value.size())
            fail("shape-mismatch", "gradient for " + params[i]->name + " has " +
                                       std::to_string(grads[i].size()) + " values, expected " +
                                       std::to_string(value.size()));
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (size_t j = 0; j < value.size(); ++j) {
            const double g = static_cast<double>(grads[i][j]);
            const double mj = st.beta1 * static_cast<double>(m[j]) + (1.0 - st.beta1) * g;
            const double vj = st.beta2 * static_cast<double>(v[j]) + (1.0 - st.beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = lr * (mj / corr1) / (std::sqrt(vj / corr2) + st.eps);
            value[j] = static_cast<T>(static_cast<double>(value[j]) - update);
        }
    }
}

double lr_schedule(int epoch, const TrainConfig& cfg);

struct TrainPair {
    std::string id;
    Image rainy;
    Image clean;
};

struct EpochStats {
    int epoch = 0;
    double loss = 0, psnr = 0, ssim = 0, lr = 0;
};

struct TrainResult {
    std::vector<EpochStats> history;
};

using LogSink = std::function<void(const std::string&)>;
using EpochCallback = std::function<void(int)>;

TrainResult train_supervised(CollaborativeModel<float>& model, const std::vector<TrainPair>& pairs,
                             const TrainConfig& cfg, AdamState<float>& opt,
                             const LogSink& log = nullptr,
                             const EpochCallback& after_epoch = nullptr);

// Optimizer state as checkpoint entries (opt.step plus per-parameter
// moment tensors) and the reverse mapping. Unrelated entries are ignored
// on restore.
std::vector<CheckpointEntry> adam_entries(const AdamState<float>& st,
                                          const ParamStore<float>& store);
void adam_restore(AdamState<float>& st, const ParamStore<float>& store,
                  const std::vector<CheckpointEntry>& entries);

struct FinetuneEpoch {
    int epoch = 0;
    double content_mean = 0;  // L1 drift from the pseudo labels, averaged over steps
    double kl_mean = 0;       // unweighted histogram divergence, averaged over steps
    double label_delta = 0;   // mean |new label - old label| at the epoch-end rewrite
    int store_writes = 0;     // pseudo-label store rewrites performed this epoch
};

struct FinetuneResult {
    std::vector<FinetuneEpoch> history;
    std::vector<Image> labels;  // final pseudo labels, aligned with the input order
};

// Self-supervised refinement on unpaired rainy images: each epoch trains
// against the previous epoch's derained outputs, then re-derains every
// image to refresh those pseudo labels. When run_dir is non-empty the
// labels are also written there as PPMs with a manifest.
FinetuneResult finetune_online(CollaborativeModel<float>& model,
                               const std::vector<Image>& real_images,
                               const std::vector<std::string>& ids, const TrainConfig& cfg,
                               AdamState<float>& opt, const std::string& run_dir = "",
                               const LogSink& log = nullptr);

struct EvalRow {
    std::string id;
    double psnr = 0, ssim = 0;
};

struct EvalResult {
    std::vector<EvalRow> rows;
    double mean_psnr = 0, mean_ssim = 0;
};

// Full-image inference; sides not divisible by 8 are reflect-padded on the
// bottom/right, derained, and cropped back. The returned image is the raw
// residual subtraction, not clamped to [0,1].
Image derain_image(const CollaborativeModel<float>& model, const Image& rainy);

EvalResult evaluate(const CollaborativeModel<float>& model, const std::vector<TrainPair>& pairs,
                    const LogSink& log = nullptr);

std::string format_eval_table(const EvalResult& result);

// Pair discovery for a data directory: reads manifest.txt lines
// `id rain_file clean_file` when present, otherwise pairs *_rain.ppm with
// *_clean.ppm by shared stem.
std::vector<TrainPair> load_pairs(const std::string& dir);
std::vector<Image> load_images_sorted(const std::string& dir, std::vector<std::string>* ids_out);

}  // namespace derain
