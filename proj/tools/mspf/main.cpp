// mspf: command-line front end over the C API. Exit codes: 0 success,
// 2 usage or input error, 3 runtime numeric failure.

#include "mspformer/mspformer.h"

#include "CLI11.hpp"

#include <cstdio>
#include <string>
#include <vector>

namespace {

struct ConfigHandle {
    mspf_config* ptr = nullptr;
    ~ConfigHandle() { mspf_config_free(ptr); }
    ConfigHandle() = default;
    ConfigHandle(const ConfigHandle&) = delete;
    ConfigHandle& operator=(const ConfigHandle&) = delete;
};

struct StringHandle {
    char* ptr = nullptr;
    ~StringHandle() { mspf_string_free(ptr); }
    StringHandle() = default;
    StringHandle(const StringHandle&) = delete;
    StringHandle& operator=(const StringHandle&) = delete;
};

int fail(mspf_status st) {
    std::fprintf(stderr, "mspf: %s\n", mspf_last_error());
    return mspf_exit_code(st);
}

// Loads --config and applies the shared runtime overrides.
bool load_config(ConfigHandle& cfg, const std::string& path, bool deterministic, int threads) {
    cfg.ptr = mspf_config_load(path.c_str());
    if (!cfg.ptr) return false;
    if (deterministic && mspf_config_set(cfg.ptr, "io.deterministic", "true") != MSPF_OK)
        return false;
    if (threads > 0 &&
        mspf_config_set(cfg.ptr, "io.threads", std::to_string(threads).c_str()) != MSPF_OK)
        return false;
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MSP-Former single-image snow removal toolkit"};
    app.require_subcommand(1);

    bool deterministic = false;
    int threads = 0;
    app.add_flag("--deterministic", deterministic,
                 "reference mode: single-threaded 64-bit execution");
    app.add_option("--threads", threads, "worker thread cap (0: MSPF_THREADS or 1)");

    std::string config_path, clean_dir, data_dir, out_dir, ckpt_path;
    std::string input_path, output_path, report_path, scope = "all", res = "256x256";
    std::string resume_ckpt;
    long long count = 0;
    uint64_t seed = 0;
    bool seed_given = false;
    std::vector<std::string> variants;

    CLI::App* synth = app.add_subcommand("synth", "render a paired snow/clean dataset");
    synth->add_option("--clean", clean_dir, "directory of clean .ppm images")->required();
    synth->add_option("--out", out_dir, "output dataset directory")->required();
    synth->add_option("--config", config_path, "run configuration file")->required();
    synth->add_option("--seed", seed, "override snow.seed")->each([&](const std::string&) {
        seed_given = true;
    });
    synth->add_option("--count", count, "number of pairs to render")->required();

    CLI::App* train = app.add_subcommand("train", "train on a paired dataset");
    train->add_option("--config", config_path, "run configuration file")->required();
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--out", out_dir, "artifact directory")->required();
    train->add_option("--resume", resume_ckpt, "checkpoint to resume from");

    CLI::App* infer = app.add_subcommand("infer", "restore one image");
    infer->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    infer->add_option("--input", input_path, "degraded input image (P6 PPM)")->required();
    infer->add_option("--output", output_path, "restored output image")->required();

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--report", report_path, "write the TSV table to this file");

    CLI::App* ablate = app.add_subcommand("ablate", "train and compare architecture variants");
    ablate->add_option("--variant", variants, "variant to run (repeatable)")
        ->required()
        ->check(CLI::IsMember({"msp", "ssp", "sra", "ma", "no-lcb", "no-cs"}));
    ablate->add_option("--config", config_path, "run configuration file")->required();
    ablate->add_option("--data", data_dir, "dataset directory")->required();
    ablate->add_option("--out", out_dir, "artifact directory")->required();

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    gradcheck->add_option("--scope", scope, "ops, blocks, model, or all")
        ->check(CLI::IsMember({"ops", "blocks", "model", "all"}));

    CLI::App* cost = app.add_subcommand("cost", "parameter and MAC accounting");
    cost->add_option("--config", config_path, "run configuration file")->required();
    cost->add_option("--res", res, "input resolution as HxW (default 256x256)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    if (app.got_subcommand(synth)) {
        ConfigHandle cfg;
        if (!load_config(cfg, config_path, deterministic, threads)) return fail(MSPF_ERR_CONFIG);
        if (seed_given &&
            mspf_config_set(cfg.ptr, "snow.seed", std::to_string(seed).c_str()) != MSPF_OK)
            return fail(MSPF_ERR_CONFIG);
        const mspf_status st = mspf_cmd_synth(cfg.ptr, clean_dir.c_str(), out_dir.c_str(), count);
        if (st != MSPF_OK) return fail(st);
        std::printf("synth: wrote %lld pair(s) to %s\n", count, out_dir.c_str());
        return 0;
    }

    if (app.got_subcommand(train)) {
        ConfigHandle cfg;
        if (!load_config(cfg, config_path, deterministic, threads)) return fail(MSPF_ERR_CONFIG);
        const mspf_status st = mspf_cmd_train(cfg.ptr, data_dir.c_str(), out_dir.c_str(),
                                              resume_ckpt.empty() ? nullptr : resume_ckpt.c_str());
        if (st != MSPF_OK) return fail(st);
        std::printf("train: checkpoints and train.log in %s\n", out_dir.c_str());
        return 0;
    }

    if (app.got_subcommand(infer)) {
        const mspf_status st =
            mspf_cmd_infer(ckpt_path.c_str(), input_path.c_str(), output_path.c_str());
        if (st != MSPF_OK) return fail(st);
        std::printf("infer: wrote %s\n", output_path.c_str());
        return 0;
    }

    if (app.got_subcommand(eval)) {
        StringHandle table;
        const mspf_status st = mspf_cmd_eval(ckpt_path.c_str(), data_dir.c_str(),
                                             report_path.empty() ? nullptr : report_path.c_str(),
                                             &table.ptr);
        if (st != MSPF_OK) return fail(st);
        std::fputs(table.ptr, stdout);
        return 0;
    }

    if (app.got_subcommand(ablate)) {
        ConfigHandle cfg;
        if (!load_config(cfg, config_path, deterministic, threads)) return fail(MSPF_ERR_CONFIG);
        std::string joined;
        for (const auto& v : variants) {
            if (!joined.empty()) joined += ",";
            joined += v;
        }
        StringHandle table;
        const mspf_status st = mspf_cmd_ablate(cfg.ptr, joined.c_str(), data_dir.c_str(),
                                               out_dir.c_str(), &table.ptr);
        if (st != MSPF_OK) return fail(st);
        std::fputs(table.ptr, stdout);
        return 0;
    }

    if (app.got_subcommand(gradcheck)) {
        StringHandle report;
        const mspf_status st = mspf_cmd_gradcheck(scope.c_str(), &report.ptr);
        if (report.ptr) std::fputs(report.ptr, stdout);
        if (st != MSPF_OK) return fail(st);
        return 0;
    }

    if (app.got_subcommand(cost)) {
        ConfigHandle cfg;
        if (!load_config(cfg, config_path, deterministic, threads)) return fail(MSPF_ERR_CONFIG);
        StringHandle report;
        const mspf_status st = mspf_cmd_cost(cfg.ptr, res.c_str(), &report.ptr);
        if (st != MSPF_OK) return fail(st);
        std::fputs(report.ptr, stdout);
        return 0;
    }

    return 2;
}
