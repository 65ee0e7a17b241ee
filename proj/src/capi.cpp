// C boundary for the MSP-Former library. Translates exceptions into status
// codes with a per-thread message, owns the opaque handle types, and hosts
// the command implementations shared by the CLI.

#include "mspformer/mspformer.h"

#include "mspf/config.hpp"
#include "mspf/gradcheck.hpp"
#include "mspf/train.hpp"

#include <charconv>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

struct mspf_config {
    mspf::RunConfig cfg;
};

struct mspf_model {
    mspf::Model<double> model;
};

namespace {

thread_local std::string g_last_error;

mspf_status capture_current() noexcept {
    try {
        throw;
    } catch (const mspf::ConfigError& e) {
        g_last_error = e.what();
        return MSPF_ERR_CONFIG;
    } catch (const mspf::FormatError& e) {
        g_last_error = e.what();
        return MSPF_ERR_FORMAT;
    } catch (const mspf::IoError& e) {
        g_last_error = e.what();
        return MSPF_ERR_IO;
    } catch (const mspf::ShapeError& e) {
        g_last_error = e.what();
        return MSPF_ERR_SHAPE;
    } catch (const mspf::DomainError& e) {
        g_last_error = e.what();
        return MSPF_ERR_DOMAIN;
    } catch (const mspf::NumericError& e) {
        g_last_error = e.what();
        return MSPF_ERR_NUMERIC;
    } catch (const mspf::ContractError& e) {
        g_last_error = e.what();
        return MSPF_ERR_CONTRACT;
    } catch (const mspf::TrackingError& e) {
        g_last_error = e.what();
        return MSPF_ERR_CONTRACT;
    } catch (const mspf::Error& e) {
        g_last_error = e.what();
        return MSPF_ERR_UNKNOWN;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return MSPF_ERR_UNKNOWN;
    } catch (...) {
        g_last_error = "unknown failure";
        return MSPF_ERR_UNKNOWN;
    }
}

template <typename Fn>
mspf_status guarded(Fn&& fn) noexcept {
    g_last_error.clear();
    try {
        fn();
        return MSPF_OK;
    } catch (...) {
        return capture_current();
    }
}

// Handle factories return null on failure; the status is recoverable from
// the message only, which suffices for constructors.
template <typename Fn>
auto guarded_make(Fn&& fn) noexcept -> decltype(fn()) {
    g_last_error.clear();
    try {
        return fn();
    } catch (...) {
        capture_current();
        return nullptr;
    }
}

void require(bool ok, const char* what) {
    if (!ok) throw mspf::ContractError(what);
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void set_out(char** slot, const std::string& text) {
    if (slot) *slot = dup_string(text);
}

// ------------------------------------------------------------------
// Shared command bodies.

mspf::Model<double> load_model_f64(const std::string& ckpt_path) {
    const auto ck = mspf::read_checkpoint(ckpt_path);
    const std::string text = mspf::checkpoint_config(ck);
    if (text.empty())
        throw mspf::FormatError(ckpt_path + ": checkpoint carries no embedded configuration", 0);
    const mspf::RunConfig cfg = mspf::parse_run_config(text);
    auto model = mspf::build_model<double>(cfg.model, 0);
    mspf::load_model_params(model, ck);
    return model;
}

template <typename T>
void run_train(const mspf::RunConfig& cfg, const char* data_dir, const char* out_dir,
               const char* resume_ckpt) {
    const auto entries = mspf::list_dataset(data_dir);
    auto model = mspf::build_model<T>(cfg.model, cfg.train.seed);
    auto st = mspf::init_optim(model);
    if (resume_ckpt) {
        const auto ck = mspf::read_checkpoint(resume_ckpt);
        mspf::load_model_params(model, ck);
        st = mspf::load_optim_state(model, ck);
    }
    std::filesystem::create_directories(out_dir);
    const std::string log_path = mspf::detail::join_path(out_dir, "train.log");
    std::ofstream log(log_path, std::ios::binary);
    if (!log) throw mspf::IoError("cannot create training log: " + log_path);
    const auto res = mspf::train_loop(model, st, cfg, entries, out_dir, log);
    if (res.aborted)
        throw mspf::NumericError("training aborted on a non-finite loss; last checkpoint: " +
                                 (res.last_checkpoint.empty() ? std::string("none")
                                                              : res.last_checkpoint));
}

void cmd_train_impl(const mspf::RunConfig& cfg, const char* data_dir, const char* out_dir,
                    const char* resume_ckpt) {
    cfg.validate();
    // Reference mode trains in 64-bit; the fast path uses 32-bit parameters.
    if (cfg.deterministic)
        run_train<double>(cfg, data_dir, out_dir, resume_ckpt);
    else
        run_train<float>(cfg, data_dir, out_dir, resume_ckpt);
}

std::string cmd_eval_impl(const std::string& ckpt_path, const char* data_dir,
                          const char* report_path) {
    const auto model = load_model_f64(ckpt_path);
    const auto entries = mspf::list_dataset(data_dir);
    const auto summary = mspf::evaluate(model, entries, mspf::thread_budget());
    const std::string table = mspf::eval_report_tsv(summary);
    if (report_path) {
        std::ofstream out(report_path, std::ios::binary);
        if (!out) throw mspf::IoError(std::string("cannot create report: ") + report_path);
        out << table;
        if (!out) throw mspf::IoError(std::string("failed writing report: ") + report_path);
    }
    return table;
}

struct VariantSpec {
    std::string name;
    mspf::RunConfig cfg;
};

// msp, no-lcb and no-cs pin the attention to the paired average-pooling
// scheme so rows differ in exactly one axis; ma/sra/ssp swap the attention
// only.
VariantSpec variant_config(const std::string& name, const mspf::RunConfig& base) {
    VariantSpec v{name, base};
    v.cfg.model.use_lcb = true;
    v.cfg.model.use_shuffle = true;
    if (name == "msp") {
        v.cfg.model.variant = mspf::AttnVariant::kAA;
    } else if (name == "ma") {
        v.cfg.model.variant = mspf::AttnVariant::kMA;
    } else if (name == "sra") {
        v.cfg.model.variant = mspf::AttnVariant::kSRA;
    } else if (name == "ssp") {
        v.cfg.model.variant = mspf::AttnVariant::kSSP;
    } else if (name == "no-lcb") {
        v.cfg.model.variant = mspf::AttnVariant::kAA;
        v.cfg.model.use_lcb = false;
    } else if (name == "no-cs") {
        v.cfg.model.variant = mspf::AttnVariant::kAA;
        v.cfg.model.use_shuffle = false;
    } else {
        throw mspf::ConfigError("unknown variant: " + name);
    }
    return v;
}

std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> out;
    size_t start = 0;
    for (;;) {
        const size_t comma = text.find(',', start);
        std::string part = text.substr(start, comma - start);
        const size_t a = part.find_first_not_of(" \t");
        const size_t b = part.find_last_not_of(" \t");
        if (a != std::string::npos) out.push_back(part.substr(a, b - a + 1));
        if (comma == std::string::npos) return out;
        start = comma + 1;
    }
}

std::string cmd_ablate_impl(const mspf::RunConfig& base, const char* variants,
                            const char* data_dir, const char* out_dir) {
    const auto names = split_csv(variants);
    if (names.empty()) throw mspf::ConfigError("ablate: no variants requested");
    std::vector<VariantSpec> specs;
    for (const auto& n : names) specs.push_back(variant_config(n, base));

    std::string table = "variant\tparams\tmacs\tpsnr\tssim\n";
    for (const auto& spec : specs) {
        spec.cfg.validate();
        const std::string run_dir = mspf::detail::join_path(out_dir, spec.name);
        cmd_train_impl(spec.cfg, data_dir, run_dir.c_str(), nullptr);

        const auto model = load_model_f64(mspf::detail::join_path(run_dir, "ckpt_final.mspf"));
        const auto entries = mspf::list_dataset(data_dir);
        const auto summary = mspf::evaluate(model, entries, mspf::thread_budget());
        const int64_t params = mspf::count_params(model);
        const int64_t macs = mspf::count_macs(spec.cfg.model, 256, 256).total();
        table += spec.name + "\t" + std::to_string(params) + "\t" + std::to_string(macs) + "\t" +
                 mspf::detail::cfg_num(summary.mean_out_psnr) + "\t" +
                 mspf::detail::cfg_num(summary.mean_out_ssim) + "\n";
    }

    std::filesystem::create_directories(out_dir);
    const std::string table_path = mspf::detail::join_path(out_dir, "ablation.tsv");
    std::ofstream out(table_path, std::ios::binary);
    if (!out) throw mspf::IoError("cannot create ablation table: " + table_path);
    out << table;
    if (!out) throw mspf::IoError("failed writing ablation table: " + table_path);
    return table;
}

int64_t parse_extent(const std::string& s) {
    int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || v <= 0)
        throw mspf::ConfigError("cost: resolution must be <height>x<width>, got " + s);
    return v;
}

std::string cmd_cost_impl(const mspf::RunConfig& cfg, const char* res) {
    cfg.model.validate();
    std::string spec = res ? res : "256x256";
    size_t x = spec.find('x');
    if (x == std::string::npos) x = spec.find('X');
    if (x == std::string::npos)
        throw mspf::ConfigError("cost: resolution must be <height>x<width>, got " + spec);
    const int64_t h = parse_extent(spec.substr(0, x));
    const int64_t w = parse_extent(spec.substr(x + 1));

    const auto model = mspf::build_model<double>(cfg.model, 0);
    const auto macs = mspf::count_macs(cfg.model, h, w);
    std::ostringstream o;
    o << "params=" << mspf::count_params(model) << "\n";
    o << "res=" << h << "x" << w << "\n";
    o << "macs.conv=" << macs.conv << "\n";
    o << "macs.linear=" << macs.linear << "\n";
    o << "macs.attention=" << macs.attention << "\n";
    o << "macs.total=" << macs.total() << "\n";
    return o.str();
}

}  // namespace

extern "C" {

const char* mspf_last_error(void) { return g_last_error.c_str(); }

int mspf_exit_code(mspf_status status) {
    if (status == MSPF_OK) return 0;
    if (status == MSPF_ERR_NUMERIC) return 3;
    return 2;
}

mspf_config* mspf_config_default(void) {
    return guarded_make([] { return new mspf_config{}; });
}

mspf_config* mspf_config_load(const char* path) {
    return guarded_make([&]() -> mspf_config* {
        require(path != nullptr, "mspf_config_load: path is null");
        return new mspf_config{mspf::load_run_config(path)};
    });
}

mspf_config* mspf_config_parse(const char* text) {
    return guarded_make([&]() -> mspf_config* {
        require(text != nullptr, "mspf_config_parse: text is null");
        return new mspf_config{mspf::parse_run_config(text)};
    });
}

mspf_status mspf_config_set(mspf_config* cfg, const char* key, const char* value) {
    return guarded([&] {
        require(cfg != nullptr, "mspf_config_set: config is null");
        require(key != nullptr && value != nullptr, "mspf_config_set: key or value is null");
        const std::string k = key;
        const size_t dot = k.find('.');
        if (dot == std::string::npos)
            throw mspf::ConfigError("config key must be section.key: " + k);
        const std::string section = k.substr(0, dot);
        const std::string leaf = k.substr(dot + 1);
        if (section == "model")
            mspf::detail::apply_model_key(cfg->cfg.model, leaf, value, 0);
        else if (section == "train")
            mspf::detail::apply_train_key(cfg->cfg.train, leaf, value, 0);
        else if (section == "snow")
            mspf::detail::apply_snow_key(cfg->cfg.snow, leaf, value, 0);
        else if (section == "io")
            mspf::detail::apply_io_key(cfg->cfg, leaf, value, 0);
        else
            throw mspf::ConfigError("unknown section: " + section);
    });
}

char* mspf_config_serialize(const mspf_config* cfg) {
    return guarded_make([&]() -> char* {
        require(cfg != nullptr, "mspf_config_serialize: config is null");
        return dup_string(mspf::serialize_run_config(cfg->cfg));
    });
}

void mspf_config_free(mspf_config* cfg) { delete cfg; }

void mspf_string_free(char* s) { std::free(s); }

mspf_model* mspf_model_build(const mspf_config* cfg, uint64_t seed) {
    return guarded_make([&]() -> mspf_model* {
        require(cfg != nullptr, "mspf_model_build: config is null");
        return new mspf_model{mspf::build_model<double>(cfg->cfg.model, seed)};
    });
}

mspf_model* mspf_model_load(const char* ckpt_path) {
    return guarded_make([&]() -> mspf_model* {
        require(ckpt_path != nullptr, "mspf_model_load: path is null");
        return new mspf_model{load_model_f64(ckpt_path)};
    });
}

int64_t mspf_model_param_count(const mspf_model* m) {
    if (!m) {
        g_last_error = "mspf_model_param_count: model is null";
        return -1;
    }
    return mspf::count_params(m->model);
}

mspf_status mspf_model_macs(const mspf_model* m, int64_t h, int64_t w, int64_t* out_total) {
    return guarded([&] {
        require(m != nullptr, "mspf_model_macs: model is null");
        require(out_total != nullptr, "mspf_model_macs: out_total is null");
        *out_total = mspf::count_macs(m->model.cfg, h, w).total();
    });
}

mspf_status mspf_model_restore_image(const mspf_model* m, const char* input_path,
                                     const char* output_path) {
    return guarded([&] {
        require(m != nullptr, "mspf_model_restore_image: model is null");
        require(input_path != nullptr && output_path != nullptr,
                "mspf_model_restore_image: path is null");
        const auto x = mspf::image_read<double>(input_path);
        mspf::image_write(mspf::restore(m->model, x), output_path);
    });
}

void mspf_model_free(mspf_model* m) { delete m; }

mspf_status mspf_cmd_synth(const mspf_config* cfg, const char* clean_dir, const char* out_dir,
                           long long count) {
    return guarded([&] {
        require(cfg != nullptr, "mspf_cmd_synth: config is null");
        require(clean_dir != nullptr && out_dir != nullptr, "mspf_cmd_synth: directory is null");
        mspf::synth_dataset(clean_dir, out_dir, count, cfg->cfg.snow);
    });
}

mspf_status mspf_cmd_train(const mspf_config* cfg, const char* data_dir, const char* out_dir,
                           const char* resume_ckpt) {
    return guarded([&] {
        require(cfg != nullptr, "mspf_cmd_train: config is null");
        require(data_dir != nullptr && out_dir != nullptr, "mspf_cmd_train: directory is null");
        cmd_train_impl(cfg->cfg, data_dir, out_dir, resume_ckpt);
    });
}

mspf_status mspf_cmd_infer(const char* ckpt_path, const char* input_path,
                           const char* output_path) {
    return guarded([&] {
        require(ckpt_path != nullptr && input_path != nullptr && output_path != nullptr,
                "mspf_cmd_infer: path is null");
        const auto model = load_model_f64(ckpt_path);
        const auto x = mspf::image_read<double>(input_path);
        mspf::image_write(mspf::restore(model, x), output_path);
    });
}

mspf_status mspf_cmd_eval(const char* ckpt_path, const char* data_dir, const char* report_path,
                          char** out_report) {
    return guarded([&] {
        require(ckpt_path != nullptr && data_dir != nullptr, "mspf_cmd_eval: path is null");
        set_out(out_report, cmd_eval_impl(ckpt_path, data_dir, report_path));
    });
}

mspf_status mspf_cmd_ablate(const mspf_config* cfg, const char* variants, const char* data_dir,
                            const char* out_dir, char** out_table) {
    return guarded([&] {
        require(cfg != nullptr, "mspf_cmd_ablate: config is null");
        require(variants != nullptr && data_dir != nullptr && out_dir != nullptr,
                "mspf_cmd_ablate: argument is null");
        set_out(out_table, cmd_ablate_impl(cfg->cfg, variants, data_dir, out_dir));
    });
}

mspf_status mspf_cmd_gradcheck(const char* scope, char** out_report) {
    return guarded([&] {
        require(scope != nullptr, "mspf_cmd_gradcheck: scope is null");
        std::ostringstream log;
        const auto report = mspf::run_gradcheck(scope, 64, mspf::kGradcheckInstances, log);
        set_out(out_report, log.str());
        if (!report.all_pass())
            throw mspf::NumericError("gradient check failed for " +
                                     std::to_string(report.failures()) + " case(s)");
    });
}

mspf_status mspf_cmd_cost(const mspf_config* cfg, const char* res, char** out_report) {
    return guarded([&] {
        require(cfg != nullptr, "mspf_cmd_cost: config is null");
        set_out(out_report, cmd_cost_impl(cfg->cfg, res));
    });
}

}  // extern "C"
