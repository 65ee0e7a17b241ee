#pragma once

// End-to-end pipeline: dataset synthesis to disk, the training loop
// (seeded shuffle, paired augmentation, Charbonnier + AdamW, periodic
// checkpoints, line-oriented metrics log) and read-only evaluation.

#include "checkpoint.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "metrics.hpp"
#include "ppm.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace mspf {

// Renders `count` degraded/clean pairs into out_dir, cycling through the
// clean images in sorted order. Pair i draws from an independent stream of
// the snow seed, so outputs are reproducible regardless of count.
inline std::vector<std::string> synth_dataset(const std::string& clean_dir,
                                              const std::string& out_dir, int64_t count,
                                              const SnowParams& p) {
    namespace fs = std::filesystem;
    p.validate();
    if (count < 0) throw DomainError("synth_dataset: count must be >= 0");
    std::vector<std::string> clean_files;
    {
        std::error_code ec;
        fs::directory_iterator it(clean_dir, ec);
        if (ec) throw IoError("cannot open clean image directory: " + clean_dir);
        for (const auto& e : fs::directory_iterator(clean_dir))
            if (e.is_regular_file() && e.path().extension() == ".ppm")
                clean_files.push_back(e.path().string());
    }
    std::sort(clean_files.begin(), clean_files.end());
    if (count > 0 && clean_files.empty())
        throw DomainError("synth_dataset: no .ppm images in " + clean_dir);
    fs::create_directories(out_dir);

    std::vector<std::string> names;
    for (int64_t i = 0; i < count; ++i) {
        const auto clean = image_read<double>(clean_files[size_t(i % int64_t(clean_files.size()))]);
        Rng rng(Rng::derive_stream(p.seed, uint64_t(i)));
        const auto sample = synthesize_snow(clean, p, rng);
        char name[32];
        std::snprintf(name, sizeof(name), "img%04lld", static_cast<long long>(i));
        image_write(sample.snowy, detail::join_path(out_dir, std::string(name) + "_snow.ppm"));
        image_write(clean, detail::join_path(out_dir, std::string(name) + "_gt.ppm"));
        names.emplace_back(name);
    }
    write_manifest(out_dir, names, p);
    return names;
}

template <typename T>
struct LoadedPair {
    Tensor<T> snow, gt;
};

// Loads every pair into memory; training requires a fully readable dataset.
template <typename T>
std::vector<LoadedPair<T>> load_pairs(const std::vector<DatasetEntry>& entries) {
    std::vector<LoadedPair<T>> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        LoadedPair<T> p;
        p.snow = image_read<T>(e.snow_path);
        p.gt = image_read<T>(e.gt_path);
        if (p.snow.shape() != p.gt.shape())
            throw ShapeError("dataset pair " + e.name + " has mismatched extents");
        out.push_back(std::move(p));
    }
    return out;
}

struct TrainResult {
    int start_epoch = 0;
    int epochs_run = 0;
    double first_epoch_loss = 0.0;
    double last_epoch_loss = 0.0;
    bool aborted = false;             // non-finite loss encountered
    std::string last_checkpoint;      // most recent successfully written file
};

namespace detail {

inline std::string format_log_value(double v) { return cfg_num(v); }

}  // namespace detail

// Runs epochs [st.t / steps_per_epoch, cfg.train.epochs). Writes
// ckpt_e<N>.mspf every checkpoint_every epochs plus ckpt_final.mspf on
// normal completion, embedding the serialized config. Log lines follow
// `epoch=<n> lr=<f> loss=<f> secs=<f>`; wall time reports as 0 in
// deterministic mode so reference logs are reproducible byte for byte.
template <typename T>
TrainResult train_loop(Model<T>& model, OptimState<T>& st, const RunConfig& cfg,
                       const std::vector<DatasetEntry>& entries, const std::string& out_dir,
                       std::ostream& log) {
    namespace fs = std::filesystem;
    cfg.validate();
    if (entries.empty()) throw DomainError("train_loop: dataset is empty");
    const TrainConfig& tc = cfg.train;
    if (tc.crop % cfg.model.size_multiple != 0)
        throw ConfigError("train: crop must be a multiple of model size_multiple");

    const auto pairs = load_pairs<T>(entries);
    for (size_t i = 0; i < pairs.size(); ++i)
        if (pairs[i].snow.size(2) < tc.crop || pairs[i].snow.size(3) < tc.crop)
            throw DomainError("train_loop: image " + entries[i].name + " is smaller than the crop");

    fs::create_directories(out_dir);
    const std::string config_text = serialize_run_config(cfg);
    const int64_t n = int64_t(pairs.size());
    const int64_t steps_per_epoch = (n + tc.batch - 1) / tc.batch;

    TrainResult res;
    res.start_epoch = int(st.t / uint64_t(steps_per_epoch));
    mark_trainable(model);

    auto save = [&](const std::string& leaf) {
        const std::string path = detail::join_path(out_dir, leaf);
        save_checkpoint(path, model, &st, config_text);
        res.last_checkpoint = path;
    };

    for (int epoch = res.start_epoch; epoch < tc.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_at(epoch, tc.schedule);
        Rng er(Rng::derive_stream(tc.seed, 0x10000u + uint64_t(epoch)));

        std::vector<int64_t> order(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
        for (int64_t i = n - 1; i > 0; --i)
            std::swap(order[size_t(i)], order[size_t(er.uniform_int(0, i))]);

        double loss_sum = 0.0;
        int64_t steps = 0;
        for (int64_t s = 0; s < steps_per_epoch; ++s) {
            const int64_t lo = s * tc.batch;
            const int64_t hi = std::min<int64_t>(n, lo + tc.batch);
            std::vector<Tensor<T>> xs, gs;
            for (int64_t i = lo; i < hi; ++i) {
                const auto& pair = pairs[size_t(order[size_t(i)])];
                auto [x, g] = augment(pair.snow, pair.gt, er, tc.crop);
                xs.push_back(x);
                gs.push_back(g);
            }
            Tensor<T> x = xs.size() == 1 ? xs[0] : concat(xs, 0);
            Tensor<T> g = gs.size() == 1 ? gs[0] : concat(gs, 0);

            Tape<T> tape;
            TapeScope<T> scope(tape);
            Tensor<T> loss = charbonnier(forward(model, x), g, tc.loss_eps);
            const double lv = double(loss.cdata()[0]);
            if (!std::isfinite(lv)) {
                res.aborted = true;
                log << "epoch=" << epoch << " aborted=non-finite-loss\n";
                log.flush();
                return res;
            }
            tape.backward(loss);
            adamw_step(model, st, tc.adamw, lr, tc.clip ? tc.clip_norm : 0.0);
            loss_sum += lv;
            ++steps;
        }

        const double epoch_loss = loss_sum / double(steps);
        double secs = 0.0;
        if (!cfg.deterministic) {
            secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
        log << "epoch=" << epoch << " lr=" << detail::format_log_value(lr)
            << " loss=" << detail::format_log_value(epoch_loss)
            << " secs=" << detail::format_log_value(secs) << "\n";
        log.flush();

        if (res.epochs_run == 0) res.first_epoch_loss = epoch_loss;
        res.last_epoch_loss = epoch_loss;
        ++res.epochs_run;
        if ((epoch + 1) % tc.checkpoint_every == 0 && epoch + 1 != tc.epochs)
            save("ckpt_e" + std::to_string(epoch + 1) + ".mspf");
    }
    save("ckpt_final.mspf");
    return res;
}

struct EvalRow {
    std::string name;
    bool ok = false;
    std::string error;      // populated when ok is false
    double out_psnr = 0.0, out_ssim = 0.0;
    double in_psnr = 0.0, in_ssim = 0.0;
};

struct EvalSummary {
    std::vector<EvalRow> rows;     // dataset order
    int64_t evaluated = 0, skipped = 0;
    double mean_out_psnr = 0.0, mean_out_ssim = 0.0;
    double mean_in_psnr = 0.0, mean_in_ssim = 0.0;
};

// Read-only, parallel per image; rows keep manifest order and the means
// reduce sequentially over that order, so results are thread-independent.
// Unreadable pairs are skipped and surface in the counts.
template <typename T>
EvalSummary evaluate(const Model<T>& model, const std::vector<DatasetEntry>& entries,
                     int threads) {
    if (entries.empty()) throw DomainError("evaluate: dataset is empty");
    EvalSummary sum;
    sum.rows.resize(entries.size());
    parallel_for(int64_t(entries.size()), threads, [&](int64_t i) {
        EvalRow& row = sum.rows[size_t(i)];
        row.name = entries[size_t(i)].name;
        try {
            const Tensor<T> x = image_read<T>(entries[size_t(i)].snow_path);
            const Tensor<T> g = image_read<T>(entries[size_t(i)].gt_path);
            if (x.shape() != g.shape())
                throw ShapeError("pair " + row.name + " has mismatched extents");
            Tensor<T> y = restore(model, x);
            for (int64_t k = 0; k < y.numel(); ++k)
                y.data()[k] = std::clamp(y.data()[k], T(0), T(1));
            row.out_psnr = psnr(y, g);
            row.out_ssim = ssim(y, g);
            row.in_psnr = psnr(x, g);
            row.in_ssim = ssim(x, g);
            row.ok = true;
        } catch (const Error& e) {
            row.ok = false;
            row.error = e.what();
        }
    });
    for (const auto& row : sum.rows) {
        if (!row.ok) {
            ++sum.skipped;
            continue;
        }
        ++sum.evaluated;
        sum.mean_out_psnr += row.out_psnr;
        sum.mean_out_ssim += row.out_ssim;
        sum.mean_in_psnr += row.in_psnr;
        sum.mean_in_ssim += row.in_ssim;
    }
    if (sum.evaluated > 0) {
        sum.mean_out_psnr /= double(sum.evaluated);
        sum.mean_out_ssim /= double(sum.evaluated);
        sum.mean_in_psnr /= double(sum.evaluated);
        sum.mean_in_ssim /= double(sum.evaluated);
    }
    return sum;
}

// UTF-8 TSV: header, one row per image in dataset order, then a mean row.
inline std::string eval_report_tsv(const EvalSummary& s) {
    std::string out = "name\tpsnr\tssim\tbaseline_psnr\tbaseline_ssim\n";
    auto num = [](double v) { return detail::cfg_num(v); };
    for (const auto& r : s.rows) {
        if (!r.ok) {
            out += r.name + "\tskipped\tskipped\tskipped\tskipped\n";
            continue;
        }
        out += r.name + "\t" + num(r.out_psnr) + "\t" + num(r.out_ssim) + "\t" +
               num(r.in_psnr) + "\t" + num(r.in_ssim) + "\n";
    }
    out += "mean\t" + num(s.mean_out_psnr) + "\t" + num(s.mean_out_ssim) + "\t" +
           num(s.mean_in_psnr) + "\t" + num(s.mean_in_ssim) + "\n";
    return out;
}

}  // namespace mspf
