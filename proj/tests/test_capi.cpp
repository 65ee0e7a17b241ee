#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mspformer/mspformer.h"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& leaf) {
        path = fs::temp_directory_path() / leaf;
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string sub(const std::string& leaf) const { return (path / leaf).string(); }
};

struct Config {
    mspf_config* ptr = nullptr;
    explicit Config(mspf_config* p) : ptr(p) {}
    ~Config() { mspf_config_free(ptr); }
};

struct OwnedString {
    char* ptr = nullptr;
    ~OwnedString() { mspf_string_free(ptr); }
    std::string str() const { return ptr ? std::string(ptr) : std::string(); }
};

void write_ppm(const std::string& path, int w, int h, unsigned seed) {
    std::ofstream out(path, std::ios::binary);
    char header[64];
    const int n = std::snprintf(header, sizeof(header), "P6\n%d %d\n255\n", w, h);
    out.write(header, n);
    // Smooth deterministic pattern; content only needs to be a valid scene.
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const unsigned char r = (unsigned char)((x * 2 + seed * 37) % 256);
            const unsigned char g = (unsigned char)((y * 3 + seed * 11) % 256);
            const unsigned char b = (unsigned char)((x + y + seed * 53) % 256);
            out.put(char(r)).put(char(g)).put(char(b));
        }
    REQUIRE(bool(out));
}

mspf_config* tiny_config() {
    mspf_config* cfg = mspf_config_default();
    REQUIRE(cfg != nullptr);
    auto set = [&](const char* k, const char* v) { REQUIRE(mspf_config_set(cfg, k, v) == MSPF_OK); };
    set("model.dims", "8,16,32,64");
    set("model.encoder_depths", "1,1,1,1");
    set("model.decoder_depths", "1,1,1");
    set("model.expansion", "2");
    set("train.epochs", "2");
    set("train.batch", "2");
    set("train.crop", "64");
    set("train.checkpoint_every", "1");
    set("train.seed", "1");
    set("snow.seed", "7");
    return cfg;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

}  // namespace

TEST_CASE("config handles: defaults, fixed point, mutation, rejection") {
    Config cfg(mspf_config_default());
    REQUIRE(cfg.ptr != nullptr);

    OwnedString text;
    text.ptr = mspf_config_serialize(cfg.ptr);
    REQUIRE(text.ptr != nullptr);
    CHECK(text.str().find("[model]") != std::string::npos);

    Config reparsed(mspf_config_parse(text.ptr));
    REQUIRE(reparsed.ptr != nullptr);
    OwnedString text2;
    text2.ptr = mspf_config_serialize(reparsed.ptr);
    REQUIRE(text2.ptr != nullptr);
    CHECK(text.str() == text2.str());

    CHECK(mspf_config_set(cfg.ptr, "train.seed", "42") == MSPF_OK);
    OwnedString text3;
    text3.ptr = mspf_config_serialize(cfg.ptr);
    CHECK(text3.str().find("seed = 42") != std::string::npos);

    CHECK(mspf_config_set(cfg.ptr, "model.bogus", "1") == MSPF_ERR_CONFIG);
    CHECK(std::string(mspf_last_error()).find("bogus") != std::string::npos);
    CHECK(mspf_config_set(cfg.ptr, "noseparator", "1") == MSPF_ERR_CONFIG);
    CHECK(mspf_config_set(nullptr, "train.seed", "1") == MSPF_ERR_CONTRACT);

    CHECK(mspf_config_parse("[model]\ndims = 1,2,3") == nullptr);
    CHECK(std::string(mspf_last_error()).size() > 0);
    CHECK(mspf_config_load("/nonexistent/path.ini") == nullptr);
}

TEST_CASE("exit code mapping is the stable 0/2/3 contract") {
    CHECK(mspf_exit_code(MSPF_OK) == 0);
    CHECK(mspf_exit_code(MSPF_ERR_NUMERIC) == 3);
    CHECK(mspf_exit_code(MSPF_ERR_CONFIG) == 2);
    CHECK(mspf_exit_code(MSPF_ERR_IO) == 2);
    CHECK(mspf_exit_code(MSPF_ERR_SHAPE) == 2);
    CHECK(mspf_exit_code(MSPF_ERR_UNKNOWN) == 2);
}

TEST_CASE("model handles: build, count, macs, invalid extents") {
    Config cfg(tiny_config());
    mspf_model* m = mspf_model_build(cfg.ptr, 3);
    REQUIRE(m != nullptr);
    CHECK(mspf_model_param_count(m) > 0);

    int64_t total = 0;
    CHECK(mspf_model_macs(m, 64, 64, &total) == MSPF_OK);
    CHECK(total > 0);
    CHECK(mspf_model_macs(m, 65, 64, &total) == MSPF_ERR_SHAPE);
    CHECK(mspf_model_macs(nullptr, 64, 64, &total) == MSPF_ERR_CONTRACT);
    CHECK(mspf_model_param_count(nullptr) == -1);
    mspf_model_free(m);

    CHECK(mspf_model_load("/nonexistent/ckpt.mspf") == nullptr);
    CHECK(std::string(mspf_last_error()).find("ckpt.mspf") != std::string::npos);
}

TEST_CASE("cost report carries params and the mac breakdown") {
    Config cfg(tiny_config());
    OwnedString report;
    REQUIRE(mspf_cmd_cost(cfg.ptr, "64x64", &report.ptr) == MSPF_OK);
    const std::string text = report.str();
    CHECK(text.find("params=") != std::string::npos);
    CHECK(text.find("res=64x64") != std::string::npos);
    CHECK(text.find("macs.total=") != std::string::npos);

    CHECK(mspf_cmd_cost(cfg.ptr, "64", nullptr) == MSPF_ERR_CONFIG);
    CHECK(mspf_cmd_cost(cfg.ptr, "axb", nullptr) == MSPF_ERR_CONFIG);
    CHECK(mspf_cmd_cost(cfg.ptr, "63x64", nullptr) == MSPF_ERR_SHAPE);
    CHECK(mspf_cmd_cost(nullptr, nullptr, nullptr) == MSPF_ERR_CONTRACT);
}

TEST_CASE("synth, train, eval, infer round trip through the C boundary") {
    TempDir tmp("mspf_capi_e2e");
    Config cfg(tiny_config());

    const std::string clean = tmp.sub("clean");
    fs::create_directories(clean);
    for (unsigned i = 0; i < 2; ++i)
        write_ppm(clean + "/img" + std::to_string(i) + ".ppm", 80, 72, i + 1);

    const std::string data = tmp.sub("data");
    REQUIRE(mspf_cmd_synth(cfg.ptr, clean.c_str(), data.c_str(), 4) == MSPF_OK);
    CHECK(fs::exists(data + "/manifest.txt"));
    CHECK(fs::exists(data + "/img0003_gt.ppm"));

    const std::string run = tmp.sub("run");
    REQUIRE(mspf_cmd_train(cfg.ptr, data.c_str(), run.c_str(), nullptr) == MSPF_OK);
    const std::string ckpt = run + "/ckpt_final.mspf";
    CHECK(fs::exists(ckpt));
    CHECK(fs::exists(run + "/train.log"));

    const std::string report_path = tmp.sub("report.tsv");
    OwnedString table;
    REQUIRE(mspf_cmd_eval(ckpt.c_str(), data.c_str(), report_path.c_str(), &table.ptr) ==
            MSPF_OK);
    CHECK(read_file(report_path) == table.str());
    CHECK(table.str().rfind("name\tpsnr\tssim\tbaseline_psnr\tbaseline_ssim\n", 0) == 0);
    CHECK(table.str().find("\nmean\t") != std::string::npos);

    const std::string out_img = tmp.sub("restored.ppm");
    REQUIRE(mspf_cmd_infer(ckpt.c_str(), (data + "/img0000_snow.ppm").c_str(),
                           out_img.c_str()) == MSPF_OK);
    const std::string header = read_file(out_img).substr(0, 64);
    CHECK(header.rfind("P6\n80 72\n255\n", 0) == 0);

    // The handle-level restore path produces the identical image.
    mspf_model* m = mspf_model_load(ckpt.c_str());
    REQUIRE(m != nullptr);
    const std::string out_img2 = tmp.sub("restored2.ppm");
    REQUIRE(mspf_model_restore_image(m, (data + "/img0000_snow.ppm").c_str(),
                                     out_img2.c_str()) == MSPF_OK);
    mspf_model_free(m);
    CHECK(read_file(out_img) == read_file(out_img2));

    // Error statuses at the command level.
    CHECK(mspf_cmd_train(cfg.ptr, tmp.sub("missing").c_str(), run.c_str(), nullptr) ==
          MSPF_ERR_IO);
    CHECK(mspf_cmd_eval(ckpt.c_str(), tmp.sub("missing").c_str(), nullptr, nullptr) ==
          MSPF_ERR_IO);
    CHECK(mspf_cmd_infer(ckpt.c_str(), tmp.sub("missing.ppm").c_str(), out_img.c_str()) ==
          MSPF_ERR_IO);
}

TEST_CASE("ablation table: parameter orderings across variants") {
    TempDir tmp("mspf_capi_ablate");
    Config cfg(tiny_config());
    REQUIRE(mspf_config_set(cfg.ptr, "train.epochs", "1") == MSPF_OK);
    // MAC accounting in the table is reported at 256x256 for comparability.

    const std::string clean = tmp.sub("clean");
    fs::create_directories(clean);
    write_ppm(clean + "/img.ppm", 72, 72, 5);
    const std::string data = tmp.sub("data");
    REQUIRE(mspf_cmd_synth(cfg.ptr, clean.c_str(), data.c_str(), 2) == MSPF_OK);

    OwnedString table;
    REQUIRE(mspf_cmd_ablate(cfg.ptr, "msp,sra,no-lcb,no-cs", data.c_str(),
                            tmp.sub("ablate").c_str(), &table.ptr) == MSPF_OK);
    CHECK(fs::exists(tmp.sub("ablate") + "/ablation.tsv"));
    CHECK(fs::exists(tmp.sub("ablate") + "/msp/ckpt_final.mspf"));

    // Parse params per variant from the TSV body.
    std::vector<std::pair<std::string, long long>> rows;
    std::istringstream in(table.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "variant\tparams\tmacs\tpsnr\tssim");
    while (std::getline(in, line)) {
        const size_t t1 = line.find('\t');
        const size_t t2 = line.find('\t', t1 + 1);
        REQUIRE(t1 != std::string::npos);
        REQUIRE(t2 != std::string::npos);
        rows.emplace_back(line.substr(0, t1), std::stoll(line.substr(t1 + 1, t2 - t1 - 1)));
    }
    REQUIRE(rows.size() == 4);
    auto params_of = [&](const std::string& name) {
        for (const auto& [n, p] : rows)
            if (n == name) return p;
        REQUIRE(false);
        return 0LL;
    };
    CHECK(params_of("sra") > params_of("msp"));
    CHECK(params_of("no-lcb") < params_of("msp"));
    CHECK(params_of("no-cs") == params_of("msp"));

    CHECK(mspf_cmd_ablate(cfg.ptr, "msp,bogus", data.c_str(), tmp.sub("ablate2").c_str(),
                          nullptr) == MSPF_ERR_CONFIG);
}

TEST_CASE("gradcheck command reports and passes on the blocks scope") {
    OwnedString report;
    REQUIRE(mspf_cmd_gradcheck("blocks", &report.ptr) == MSPF_OK);
    CHECK(report.str().find("blocks/msp_block bits=64") != std::string::npos);
    CHECK(report.str().find("gradcheck scope=blocks") != std::string::npos);

    CHECK(mspf_cmd_gradcheck("bogus", nullptr) == MSPF_ERR_CONFIG);
    CHECK(mspf_cmd_gradcheck(nullptr, nullptr) == MSPF_ERR_CONTRACT);
}
