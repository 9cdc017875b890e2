#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "clearseg/errors.hpp"
#include "clearseg/image.hpp"
#include "clearseg/runner.hpp"
#include "clearseg/safetensors.hpp"
#include "test_util.hpp"

using clearseg::AttnMode;
using clearseg::RunConfig;
using nlohmann::json;

namespace {

// Fixture bundle plus a RunConfig pointed at it, on seg params sized for the
// 16px tower.
struct Scene {
    testutil::TempDir tmp;
    std::string fixture_dir;
    RunConfig run;

    Scene() {
        fixture_dir = tmp.file("fixture");
        clearseg::write_fixture_bundle(fixture_dir, clearseg::FixtureSpec{});
        run.checkpoint = fixture_dir + "/checkpoint.safetensors";
        run.text_emb = fixture_dir + "/text.safetensors";
        run.surgery = clearseg::preset_surgery("clearclip");
        run.seg.shorter_side = 32;
        run.seg.crop = 16;
        run.seg.stride = 16;
    }

    std::string image() const { return fixture_dir + "/image.png"; }
};

int count_lines(const std::string& text) {
    int n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

} // namespace

TEST_CASE("presets resolve to the documented configurations") {
    const auto vanilla = clearseg::preset_surgery("vanilla");
    CHECK((vanilla.attn_mode == AttnMode::qk));
    CHECK(vanilla.keep_residual);
    CHECK(vanilla.keep_ffn);

    const auto maskclip = clearseg::preset_surgery("maskclip");
    CHECK((maskclip.attn_mode == AttnMode::identity));
    CHECK(!maskclip.keep_residual);
    CHECK(!maskclip.keep_ffn);

    const auto sclip = clearseg::preset_surgery("sclip");
    CHECK((sclip.attn_mode == AttnMode::qq_plus_kk));
    CHECK(sclip.keep_residual);
    CHECK(sclip.keep_ffn);

    const auto clearclip = clearseg::preset_surgery("clearclip");
    CHECK((clearclip.attn_mode == AttnMode::qq));
    CHECK(!clearclip.keep_residual);
    CHECK(!clearclip.keep_ffn);
    CHECK(clearclip.alpha == 1.0f);
    CHECK(clearclip.beta == 0.0f);

    CHECK_THROWS_AS(clearseg::preset_surgery("none"), clearseg::input_error);
}

TEST_CASE("fixture bundles are byte-identical across generations") {
    testutil::TempDir tmp;
    clearseg::write_fixture_bundle(tmp.file("one"), clearseg::FixtureSpec{});
    clearseg::write_fixture_bundle(tmp.file("two"), clearseg::FixtureSpec{});
    for (const char* name : {"checkpoint.safetensors", "text.safetensors", "image.png"})
        CHECK(testutil::read_bytes(tmp.file("one") + "/" + name) ==
              testutil::read_bytes(tmp.file("two") + "/" + name));
}

TEST_CASE("run_segment writes a label map and a manifest") {
    Scene scene;
    scene.run.out_dir = scene.tmp.file("out");
    clearseg::run_segment(scene.run, {scene.image()});

    const std::string label_path = scene.run.out_dir + "/image_label.png";
    REQUIRE(std::filesystem::exists(label_path));
    const clearseg::ImageU8 labels = clearseg::load_label_png(label_path);
    CHECK(labels.height == 32);
    CHECK(labels.width == 32);
    for (uint8_t v : labels.pixels) CHECK(v <= 1); // two fixture classes

    const json manifest = json::parse(testutil::read_text(scene.run.out_dir + "/manifest.json"));
    CHECK(manifest.at("schema_version") == clearseg::kSchemaVersion);
    CHECK(manifest.at("command") == "segment");
    CHECK(manifest.at("surgery").at("attn") == "qq");
    CHECK(manifest.at("surgery").at("residual") == false);
    CHECK(manifest.at("classes").size() == 2);
    REQUIRE(manifest.at("images").size() == 1);
    CHECK(manifest.at("images")[0].at("grid") == json({8, 8}));
    CHECK(manifest.at("images")[0].at("windows") == 4);
}

TEST_CASE("run_segment output bytes are independent of reruns and job count") {
    Scene scene;
    scene.run.out_dir = scene.tmp.file("a");
    clearseg::run_segment(scene.run, {scene.image()});
    scene.run.out_dir = scene.tmp.file("b");
    clearseg::run_segment(scene.run, {scene.image()});
    scene.run.out_dir = scene.tmp.file("c");
    scene.run.jobs = 4;
    clearseg::run_segment(scene.run, {scene.image()});

    const auto a = testutil::read_bytes(scene.tmp.file("a") + "/image_label.png");
    CHECK(a == testutil::read_bytes(scene.tmp.file("b") + "/image_label.png"));
    CHECK(a == testutil::read_bytes(scene.tmp.file("c") + "/image_label.png"));
}

TEST_CASE("run_segment can dump logits archives") {
    Scene scene;
    scene.run.out_dir = scene.tmp.file("out");
    scene.run.dump_logits = true;
    clearseg::run_segment(scene.run, {scene.image()});
    const auto archive = clearseg::read_safetensors(scene.run.out_dir + "/image_logits.safetensors");
    REQUIRE(archive.tensors.count("logits") == 1);
    CHECK(archive.tensors.at("logits").shape == std::vector<int64_t>{2, 32, 32});
}

TEST_CASE("run_segment refuses colliding output stems") {
    Scene scene;
    const std::string copy_dir = scene.tmp.file("elsewhere");
    std::filesystem::create_directories(copy_dir);
    std::filesystem::copy_file(scene.image(), copy_dir + "/image.png");
    scene.run.out_dir = scene.tmp.file("out");
    CHECK_THROWS_AS(clearseg::run_segment(scene.run, {scene.image(), copy_dir + "/image.png"}),
                    clearseg::input_error);
}

TEST_CASE("run_segment validates paths and options up front") {
    Scene scene;
    RunConfig bad = scene.run;
    bad.checkpoint = scene.tmp.file("missing.safetensors");
    CHECK_THROWS_AS(clearseg::run_segment(bad, {scene.image()}), clearseg::input_error);

    bad = scene.run;
    bad.jobs = 0;
    CHECK_THROWS_AS(clearseg::run_segment(bad, {scene.image()}), clearseg::input_error);

    bad = scene.run;
    bad.surgery.alpha = 0.0f;
    CHECK_THROWS_AS(clearseg::run_segment(bad, {scene.image()}), clearseg::input_error);

    bad = scene.run;
    bad.surgery.beta = 1.5f;
    CHECK_THROWS_AS(clearseg::run_segment(bad, {scene.image()}), clearseg::input_error);

    CHECK_THROWS_AS(clearseg::run_segment(scene.run, {}), clearseg::input_error);
}

TEST_CASE("run_eval against the model's own labels scores a perfect mIoU") {
    Scene scene;
    scene.run.out_dir = scene.tmp.file("seg");
    clearseg::run_segment(scene.run, {scene.image()});
    const std::string gt = scene.run.out_dir + "/image_label.png";

    scene.run.out_dir = scene.tmp.file("eval");
    clearseg::run_eval(scene.run, {scene.image()}, {gt});

    const json report = json::parse(testutil::read_text(scene.run.out_dir + "/report.json"));
    CHECK(report.at("miou").get<double>() == doctest::Approx(1.0));
    CHECK(report.at("schema_version") == clearseg::kSchemaVersion);
    CHECK(report.at("per_class").size() == 2);

    const std::string csv = testutil::read_text(scene.run.out_dir + "/eval.csv");
    CHECK(csv.rfind("schema_version,image,miou\n", 0) == 0);
    CHECK(count_lines(csv) == 2);
}

TEST_CASE("run_eval demands matching image and ground-truth counts") {
    Scene scene;
    CHECK_THROWS_AS(clearseg::run_eval(scene.run, {scene.image()}, {}), clearseg::input_error);
}

TEST_CASE("run_stats writes one averaged row per layer and branch") {
    Scene scene;
    scene.run.out_dir = scene.tmp.file("stats");
    clearseg::run_stats(scene.run, {scene.image()});

    const std::string csv = testutil::read_text(scene.run.out_dir + "/stats.csv");
    CHECK(csv.rfind("schema_version,layer,branch,entropy,fro_norm,max,cm_0", 0) == 0);
    CHECK(count_lines(csv) == 1 + 3 * 3); // header + three branches for three layers
    CHECK(csv.find("1,1,res,") != std::string::npos);
    CHECK(csv.find("1,3,sum,") != std::string::npos);
}

TEST_CASE("run_stats does not require text embeddings") {
    Scene scene;
    scene.run.text_emb.clear();
    scene.run.out_dir = scene.tmp.file("stats");
    clearseg::run_stats(scene.run, {scene.image()});
    CHECK(std::filesystem::exists(scene.run.out_dir + "/stats.csv"));
}

TEST_CASE("run_ablate writes a row per grid point") {
    Scene scene;
    scene.run.out_dir = scene.tmp.file("seg");
    clearseg::run_segment(scene.run, {scene.image()});
    const std::string gt = scene.run.out_dir + "/image_label.png";

    scene.run.out_dir = scene.tmp.file("ablate");
    clearseg::AblateGrid grid;
    grid.attn = {AttnMode::qq, AttnMode::identity};
    grid.residual = {false};
    grid.ffn = {false};
    grid.alpha = {1.0f};
    grid.beta = {0.0f, 0.5f};
    clearseg::run_ablate(scene.run, {scene.image()}, {gt}, grid);

    const std::string csv = testutil::read_text(scene.run.out_dir + "/ablate.csv");
    CHECK(csv.rfind("schema_version,attn,residual,ffn,alpha,beta,miou\n", 0) == 0);
    CHECK(count_lines(csv) == 1 + 4);
    CHECK(csv.find("1,qq,0,0,1,0,") != std::string::npos);
    CHECK(csv.find("1,identity,0,0,1,0.5,") != std::string::npos);
}

TEST_CASE("text embeddings with the wrong width are rejected") {
    Scene scene;
    const clearseg::TextEmbeddings narrow = clearseg::gen_fixture_text(3, 2, 4); // dim 4 vs embed 8
    const std::string path = scene.tmp.file("narrow.safetensors");
    clearseg::save_text_embeddings(path, narrow);
    scene.run.text_emb = path;
    scene.run.out_dir = scene.tmp.file("out");
    CHECK_THROWS_AS(clearseg::run_segment(scene.run, {scene.image()}), clearseg::input_error);
}

TEST_CASE("error classes map to distinct exit codes") {
    CHECK(clearseg::input_error("a", "b").exit_code() == 2);
    CHECK(clearseg::dimension_error("a", "b").exit_code() == 2);
    CHECK(clearseg::degenerate_error("a", "b").exit_code() == 2);
    CHECK(clearseg::checkpoint_error("a", "b").exit_code() == 3);
    CHECK(clearseg::numeric_error("a", "b").exit_code() == 4);
    CHECK(clearseg::error("a", "b").exit_code() == 1);
}
