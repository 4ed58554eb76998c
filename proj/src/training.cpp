#include "derain/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "derain/metrics.hpp"
#include "derain/rng.hpp"

namespace derain {

namespace {

double psnr_flat(const std::vector<float>& a, const std::vector<float>& b) {
    double mse = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double ssim_flat(const Tensor<float>& pred, const Tensor<float>& target) {
    Tensor<float> p = Tensor<float>::from_vector(pred.shape(), std::vector<float>(pred.data()));
    return static_cast<double>(ssim(p, target).item());
}

// Shuffled index order for one epoch, wrapped to fill every batch slot.
std::vector<int> epoch_order(int n, int slots, Rng& rng) {
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
    std::vector<int> order(slots);
    for (int i = 0; i < slots; ++i) order[i] = perm[i % n];
    return order;
}

std::vector<std::vector<float>> collect_grads(const ForwardContext<float>& ctx,
                                              const ParamStore<float>& store) {
    std::vector<std::vector<float>> grads;
    grads.reserve(store.all().size());
    for (const auto& p : store.all()) grads.push_back(ctx.grad(p));
    return grads;
}

void check_pair_geometry(const TrainPair& p, int crop) {
    if (p.rainy.channels != 3 || p.clean.channels != 3)
        fail("shape-mismatch", "pair " + p.id + " is not 3-channel");
    if (p.rainy.height != p.clean.height || p.rainy.width != p.clean.width)
        fail("shape-mismatch", "pair " + p.id + " has mismatched rainy/clean sizes");
    if (p.rainy.height < crop || p.rainy.width < crop)
        fail("bad-dimension", "pair " + p.id + " is smaller than the " + std::to_string(crop) +
                                  "px crop");
}

// Stacks the half-band (mapped to [0,1]) and quarter-top targets of each
// clean crop into batch tensors.
void pyramid_targets(const std::vector<Image>& clean_crops, Tensor<float>& half_out,
                     Tensor<float>& quarter_out) {
    const int n = static_cast<int>(clean_crops.size());
    const int h = clean_crops[0].height, w = clean_crops[0].width;
    std::vector<float> half;
    std::vector<float> quarter;
    half.reserve(static_cast<size_t>(n) * 3 * (h / 2) * (w / 2));
    quarter.reserve(static_cast<size_t>(n) * 3 * (h / 4) * (w / 4));
    for (const Image& c : clean_crops) {
        LaplacianPyramid pyr = pyramid_build(c);
        for (float v : pyr.band_half.pix) half.push_back((v + 1.0f) * 0.5f);
        quarter.insert(quarter.end(), pyr.top_quarter.pix.begin(), pyr.top_quarter.pix.end());
    }
    half_out = Tensor<float>::from_vector({n, 3, h / 2, w / 2}, std::move(half));
    quarter_out = Tensor<float>::from_vector({n, 3, h / 4, w / 4}, std::move(quarter));
}

std::string format_epoch_line(const EpochStats& st) {
    std::ostringstream os;
    os << st.epoch << '\t' << std::setprecision(6) << std::fixed << st.loss << '\t' << st.psnr
       << '\t' << st.ssim << '\t' << std::setprecision(7) << st.lr;
    return os.str();
}

Image clamp_unit(const Image& img) {
    Image out = img;
    for (auto& v : out.pix) v = std::min(1.0f, std::max(0.0f, v));
    return out;
}

}  // namespace

double lr_schedule(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) fail("bad-config", "epoch must be >= 0");
    double lr = cfg.lr;
    if (epoch >= cfg.lr_drop1) lr /= cfg.lr_drop_factor;
    if (epoch >= cfg.lr_drop2) lr /= cfg.lr_drop_factor;
    return lr;
}

TrainResult train_supervised(CollaborativeModel<float>& model, const std::vector<TrainPair>& pairs,
                             const TrainConfig& cfg, AdamState<float>& opt, const LogSink& log,
                             const EpochCallback& after_epoch) {
    cfg.validate();
    if (pairs.empty()) fail("empty-dataset", "training needs at least one (rainy, clean) pair");
    for (const auto& p : pairs) check_pair_geometry(p, cfg.crop);
    const bool want_half = model.cfg.mscc_half;
    const bool want_quarter = model.cfg.mscc_quarter;
    if (want_quarter && cfg.crop / 4 < 11)
        fail("bad-config", "crop " + std::to_string(cfg.crop) +
                               " leaves the quarter-scale constraint under the 11px window; "
                               "use crop >= 44 or disable it");

    const std::vector<double> alphas =
        active_alphas(model.cfg, cfg.alpha1, cfg.alpha2, cfg.alpha3);
    const int n = static_cast<int>(pairs.size());
    const int steps = (n + cfg.batch - 1) / cfg.batch;
    Rng rng(cfg.seed);
    TrainResult result;
    long long global_step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double lr = lr_schedule(epoch - 1, cfg);
        const std::vector<int> order = epoch_order(n, steps * cfg.batch, rng);
        double loss_sum = 0, psnr_sum = 0, ssim_sum = 0;

        for (int s = 0; s < steps; ++s) {
            std::vector<Image> rain_crops, clean_crops;
            rain_crops.reserve(cfg.batch);
            clean_crops.reserve(cfg.batch);
            for (int b = 0; b < cfg.batch; ++b) {
                const TrainPair& p = pairs[order[s * cfg.batch + b]];
                const int y = rng.uniform_int(p.rainy.height - cfg.crop + 1);
                const int x = rng.uniform_int(p.rainy.width - cfg.crop + 1);
                Image rc = crop_image(p.rainy, y, x, cfg.crop, cfg.crop);
                Image cc = crop_image(p.clean, y, x, cfg.crop, cfg.crop);
                if (rng.coin()) {
                    rc = hflip_image(rc);
                    cc = hflip_image(cc);
                }
                rain_crops.push_back(std::move(rc));
                clean_crops.push_back(std::move(cc));
            }
            Tensor<float> o = images_to_batch<float>(rain_crops);
            Tensor<float> target = images_to_batch<float>(clean_crops);
            Tensor<float> half_target = Tensor<float>::scalar(0.f);
            Tensor<float> quarter_target = Tensor<float>::scalar(0.f);
            if (want_half || want_quarter) pyramid_targets(clean_crops, half_target, quarter_target);

            Tape<float> tape;
            ForwardContext<float> ctx(&tape);
            ModelOutput<float> out = model_forward(model, o, ctx);
            Tensor<float> loss =
                loss_synthetic(out.b_hats, target, alphas, out.half_preds, out.quarter_preds,
                               half_target, quarter_target, cfg.beta1, cfg.beta2);
            const double loss_val = static_cast<double>(loss.item());
            if (!std::isfinite(loss_val))
                fail("nan-loss", "loss became non-finite at epoch " + std::to_string(epoch) +
                                     " step " + std::to_string(s) + " (global step " +
                                     std::to_string(global_step) + ")");
            tape.run_backward(loss);
            adam_step(model.store.all(), collect_grads(ctx, model.store), opt, lr);

            loss_sum += loss_val;
            psnr_sum += psnr_flat(out.b_hats[0].data(), target.data());
            ssim_sum += ssim_flat(out.b_hats[0], target);
            ++global_step;
        }

        EpochStats st{epoch, loss_sum / steps, psnr_sum / steps, ssim_sum / steps, lr};
        result.history.push_back(st);
        if (log) log(format_epoch_line(st));
        if (after_epoch) after_epoch(epoch);
    }
    return result;
}

std::vector<CheckpointEntry> adam_entries(const AdamState<float>& st,
                                          const ParamStore<float>& store) {
    std::vector<CheckpointEntry> entries;
    entries.push_back({"opt.step", {1, 1, 1, 1}, {static_cast<float>(st.step)}});
    if (st.m.empty()) return entries;
    const auto& params = store.all();
    for (size_t i = 0; i < params.size(); ++i) {
        entries.push_back({"opt.m." + params[i]->name, params[i]->shape, st.m[i]});
        entries.push_back({"opt.v." + params[i]->name, params[i]->shape, st.v[i]});
    }
    return entries;
}

void adam_restore(AdamState<float>& st, const ParamStore<float>& store,
                  const std::vector<CheckpointEntry>& entries) {
    const auto& params = store.all();
    bool any_moment = false;
    for (const auto& e : entries)
        if (e.name.rfind("opt.m.", 0) == 0 || e.name.rfind("opt.v.", 0) == 0) any_moment = true;
    if (any_moment) {
        st.m.assign(params.size(), {});
        st.v.assign(params.size(), {});
    }
    for (const auto& e : entries) {
        if (e.name == "opt.step") {
            st.step = static_cast<long long>(e.values[0]);
            continue;
        }
        auto bind = [&](const std::string& prefix, std::vector<std::vector<float>>& slot) {
            if (e.name.rfind(prefix, 0) != 0) return;
            const std::string pname = e.name.substr(prefix.size());
            for (size_t i = 0; i < params.size(); ++i) {
                if (params[i]->name != pname) continue;
                if (!(e.shape == params[i]->shape))
                    fail("shape-mismatch", "optimizer entry " + e.name +
                                               " does not match parameter shape");
                slot[i] = e.values;
                return;
            }
            fail("unknown-param", "optimizer entry " + e.name + " has no matching parameter");
        };
        bind("opt.m.", st.m);
        bind("opt.v.", st.v);
    }
    if (any_moment)
        for (size_t i = 0; i < params.size(); ++i)
            if (st.m[i].empty() || st.v[i].empty())
                fail("missing-param", "optimizer state lacks moments for " + params[i]->name);
}

Image derain_image(const CollaborativeModel<float>& model, const Image& rainy) {
    if (rainy.channels != 3) fail("shape-mismatch", "inference input must be 3-channel");
    const int h = rainy.height, w = rainy.width;
    const int th = std::max(((h + 7) / 8) * 8, 24);
    const int tw = std::max(((w + 7) / 8) * 8, 24);
    const int pb = th - h, pr = tw - w;
    if (pb >= h || pr >= w)
        fail("bad-dimension", "image " + std::to_string(w) + "x" + std::to_string(h) +
                                  " is too small to mirror-pad for inference; need at least "
                                  "13px per side");
    Tensor<float> t = image_to_tensor<float>(rainy);
    if (pb || pr) t = pad_reflect(t, 0, pb, 0, pr);
    ForwardContext<float> ctx(nullptr);
    Tensor<float> b_hat = model_forward(model, t, ctx).b_hats[0];
    if (pb || pr) b_hat = crop(b_hat, 0, 0, h, w);
    return tensor_to_image<float>(b_hat, 0, false);
}

EvalResult evaluate(const CollaborativeModel<float>& model, const std::vector<TrainPair>& pairs,
                    const LogSink& log) {
    if (pairs.empty()) fail("empty-dataset", "evaluation needs at least one pair");
    EvalResult result;
    for (const auto& p : pairs) {
        Image pred = clamp_unit(derain_image(model, p.rainy));
        EvalRow row{p.id, psnr(pred, p.clean), ssim_value(pred, p.clean)};
        result.rows.push_back(row);
        result.mean_psnr += row.psnr;
        result.mean_ssim += row.ssim;
    }
    result.mean_psnr /= static_cast<double>(result.rows.size());
    result.mean_ssim /= static_cast<double>(result.rows.size());
    if (log) log(format_eval_table(result));
    return result;
}

std::string format_eval_table(const EvalResult& result) {
    size_t id_width = 5;
    for (const auto& r : result.rows) id_width = std::max(id_width, r.id.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(id_width) + 2) << "image" << std::right
       << std::setw(10) << "psnr" << std::setw(10) << "ssim" << '\n';
    auto line = [&](const std::string& id, double p, double s) {
        os << std::left << std::setw(static_cast<int>(id_width) + 2) << id << std::right
           << std::fixed << std::setprecision(3) << std::setw(10) << p << std::setprecision(4)
           << std::setw(10) << s << '\n';
    };
    for (const auto& r : result.rows) line(r.id, r.psnr, r.ssim);
    line("mean", result.mean_psnr, result.mean_ssim);
    return os.str();
}

namespace {

void persist_labels(const std::string& run_dir, const std::vector<std::string>& ids,
                    const std::vector<Image>& labels, int epoch) {
    std::filesystem::create_directories(run_dir);
    std::ostringstream manifest;
    for (size_t i = 0; i < labels.size(); ++i) {
        const std::string path =
            (std::filesystem::path(run_dir) / (ids[i] + "_pseudo.ppm")).string();
        save_image(labels[i], path);
        manifest << ids[i] << '\t' << path << '\t' << epoch << '\n';
    }
    std::ofstream out(std::filesystem::path(run_dir) / "manifest.txt", std::ios::trunc);
    if (!out) fail("unwritable-path", run_dir);
    out << manifest.str();
}

}  // namespace

FinetuneResult finetune_online(CollaborativeModel<float>& model,
                               const std::vector<Image>& real_images,
                               const std::vector<std::string>& ids, const TrainConfig& cfg,
                               AdamState<float>& opt, const std::string& run_dir,
                               const LogSink& log) {
    cfg.validate();
    if (real_images.size() < 2)
        fail("empty-dataset",
             "online fine-tuning needs at least 2 images to draw a random other image");
    if (!ids.empty() && ids.size() != real_images.size())
        fail("bad-config", "id list length does not match the image count");
    const int n = static_cast<int>(real_images.size());
    std::vector<std::string> names = ids;
    if (names.empty()) {
        for (int i = 0; i < n; ++i) {
            std::ostringstream os;
            os << "real" << std::setw(4) << std::setfill('0') << i;
            names.push_back(os.str());
        }
    }
    for (int i = 0; i < n; ++i) {
        const Image& img = real_images[i];
        if (img.channels != 3) fail("shape-mismatch", names[i] + " is not 3-channel");
        if (img.height < cfg.crop || img.width < cfg.crop)
            fail("bad-dimension",
                 names[i] + " is smaller than the " + std::to_string(cfg.crop) + "px crop");
    }

    FinetuneResult result;
    result.labels.reserve(n);
    for (const Image& img : real_images) result.labels.push_back(derain_image(model, img));

    std::vector<char> trainable;
    if (cfg.freeze_companions_online) {
        for (const auto& p : model.store.all()) {
            const bool own_stream = p->name.rfind("b.", 0) == 0 ||
                                    p->name.rfind("shead.n11", 0) == 0 ||
                                    p->name.rfind("shead.n12", 0) == 0;
            trainable.push_back(own_stream ? 1 : 0);
        }
    }

    const int steps = (n + cfg.batch - 1) / cfg.batch;
    Rng rng(cfg.seed);

    for (int epoch = 1; epoch <= cfg.epoch_real; ++epoch) {
        const std::vector<int> order = epoch_order(n, steps * cfg.batch, rng);
        double content_sum = 0, kl_sum = 0;

        for (int s = 0; s < steps; ++s) {
            std::vector<Image> rain_crops, label_crops, other_rain_crops;
            for (int b = 0; b < cfg.batch; ++b) {
                const int idx = order[s * cfg.batch + b];
                const Image& o_img = real_images[idx];
                const int y = rng.uniform_int(o_img.height - cfg.crop + 1);
                const int x = rng.uniform_int(o_img.width - cfg.crop + 1);
                rain_crops.push_back(crop_image(o_img, y, x, cfg.crop, cfg.crop));
                label_crops.push_back(crop_image(result.labels[idx], y, x, cfg.crop, cfg.crop));

                int other = rng.uniform_int(n - 1);
                if (other >= idx) ++other;
                const Image& r_img = real_images[other];
                const int ry = rng.uniform_int(r_img.height - cfg.crop + 1);
                const int rx = rng.uniform_int(r_img.width - cfg.crop + 1);
                Image oc = crop_image(r_img, ry, rx, cfg.crop, cfg.crop);
                Image lc = crop_image(result.labels[other], ry, rx, cfg.crop, cfg.crop);
                // the random image's rain estimate: observation minus its
                // own pseudo label
                for (size_t i = 0; i < oc.pix.size(); ++i) oc.pix[i] -= lc.pix[i];
                other_rain_crops.push_back(std::move(oc));
            }
            Tensor<float> o = images_to_batch<float>(rain_crops);
            Tensor<float> b_km1 = images_to_batch<float>(label_crops);
            Tensor<float> r_random = images_to_batch<float>(other_rain_crops);

            Tape<float> tape;
            ForwardContext<float> ctx(&tape);
            Tensor<float> b_k = model_forward(model, o, ctx).b_hats[0];
            Tensor<float> r_k = sub(o, b_k);
            Tensor<float> loss = loss_real(b_k, b_km1, r_k, r_random, cfg.lambda);
            const double loss_val = static_cast<double>(loss.item());
            if (!std::isfinite(loss_val))
                fail("nan-loss", "loss became non-finite at online epoch " +
                                     std::to_string(epoch) + " step " + std::to_string(s));
            tape.run_backward(loss);
            adam_step(model.store.all(), collect_grads(ctx, model.store), opt, cfg.lr,
                      trainable.empty() ? nullptr : &trainable);

            double content = 0;
            const auto& bk = b_k.data();
            const auto& bp = b_km1.data();
            for (size_t i = 0; i < bk.size(); ++i)
                content += std::abs(static_cast<double>(bk[i]) - static_cast<double>(bp[i]));
            content /= static_cast<double>(bk.size());
            content_sum += content;
            if (cfg.lambda > 0)
                kl_sum += static_cast<double>(
                    kl_histogram(Tensor<float>::from_vector(r_k.shape(),
                                                            std::vector<float>(r_k.data())),
                                 r_random)
                        .item());
        }

        // Alg. ordering: the pseudo labels change only here, once, after
        // every gradient step of the epoch.
        double delta_sum = 0;
        long long delta_count = 0;
        for (int i = 0; i < n; ++i) {
            Image fresh = derain_image(model, real_images[i]);
            for (size_t j = 0; j < fresh.pix.size(); ++j)
                delta_sum += std::abs(static_cast<double>(fresh.pix[j]) -
                                      static_cast<double>(result.labels[i].pix[j]));
            delta_count += static_cast<long long>(fresh.pix.size());
            result.labels[i] = std::move(fresh);
        }

        FinetuneEpoch st;
        st.epoch = epoch;
        st.content_mean = content_sum / steps;
        st.kl_mean = cfg.lambda > 0 ? kl_sum / steps : 0;
        st.label_delta = delta_sum / static_cast<double>(delta_count);
        st.store_writes = 1;
        result.history.push_back(st);
        if (!run_dir.empty()) persist_labels(run_dir, names, result.labels, epoch);
        if (log) {
            std::ostringstream os;
            os << epoch << '\t' << std::setprecision(6) << std::fixed << st.content_mean << '\t'
               << st.kl_mean << '\t' << st.label_delta;
            log(os.str());
        }
    }
    return result;
}

std::vector<TrainPair> load_pairs(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) fail("missing-file", dir + " is not a directory");
    std::vector<TrainPair> pairs;
    const fs::path manifest = fs::path(dir) / "manifest.txt";
    if (fs::exists(manifest)) {
        std::ifstream in(manifest);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            std::istringstream is(line);
            std::string id, rain_file, clean_file;
            if (!(is >> id >> rain_file >> clean_file))
                fail("bad-header", manifest.string() + ":" + std::to_string(line_no) +
                                       ": expected `id rain clean`");
            pairs.push_back({id, load_image((fs::path(dir) / rain_file).string()),
                             load_image((fs::path(dir) / clean_file).string())});
        }
    } else {
        std::vector<std::string> stems;
        for (const auto& entry : fs::directory_iterator(dir)) {
            const std::string name = entry.path().filename().string();
            const std::string tail = "_rain.ppm";
            if (name.size() > tail.size() &&
                name.compare(name.size() - tail.size(), tail.size(), tail) == 0)
                stems.push_back(name.substr(0, name.size() - tail.size()));
        }
        std::sort(stems.begin(), stems.end());
        for (const auto& stem : stems) {
            const std::string rain_file = (fs::path(dir) / (stem + "_rain.ppm")).string();
            const std::string clean_file = (fs::path(dir) / (stem + "_clean.ppm")).string();
            if (!fs::exists(clean_file))
                fail("missing-file", clean_file + " (paired with " + rain_file + ")");
            pairs.push_back({stem, load_image(rain_file), load_image(clean_file)});
        }
    }
    if (pairs.empty()) fail("empty-dataset", "no image pairs found in " + dir);
    return pairs;
}

std::vector<Image> load_images_sorted(const std::string& dir, std::vector<std::string>* ids_out) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) fail("missing-file", dir + " is not a directory");
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string ext = entry.path().extension().string();
        if (ext == ".ppm" || ext == ".pgm") files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) fail("empty-dataset", "no .ppm/.pgm images in " + dir);
    std::vector<Image> images;
    for (const auto& f : files) {
        images.push_back(load_image(f));
        if (ids_out) ids_out->push_back(fs::path(f).stem().string());
    }
    return images;
}

}  // namespace derain
