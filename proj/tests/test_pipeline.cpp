#include <doctest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ditvq/pipeline.hpp"
#include "support.hpp"

using namespace ditvq;
using namespace ditvq::testing;

namespace {

const std::string kCli = DITVQ_CLI_PATH;

// Small enough that a whole quantize/calibrate/eval cycle takes well under a second.
const std::string kToyFlags = "--depth 1 --hidden 16 --heads 2 --tokens 4 --classes 3 --timesteps 4";

DiTConfig toy_config() {
  DiTConfig c;
  c.depth = 1;
  c.hidden = 16;
  c.heads = 2;
  c.tokens = 4;
  c.classes = 3;
  c.timesteps = 4;
  return c;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

}  // namespace

TEST_CASE("plan presets and overrides") {
  PlanSpec two;
  two.preset = "2bit";
  CHECK(resolve_plan(two)("blocks.0.fc1.weight", 64, 16) == std::pair<std::size_t, std::size_t>{256, 4});
  PlanSpec three;
  three.preset = "3bit";
  CHECK(resolve_plan(three)("blocks.0.fc1.weight", 64, 16) == std::pair<std::size_t, std::size_t>{64, 2});

  PlanSpec bits;
  bits.dim = 6;
  bits.bits = 2.0;
  bits.overrides = {"fc1=16x2", "blocks.0.query=4x1"};
  const auto plan = resolve_plan(bits);
  CHECK(plan("blocks.1.key.weight", 8, 12) == std::pair<std::size_t, std::size_t>{4096, 6});
  CHECK(plan("blocks.1.fc1.weight", 8, 12) == std::pair<std::size_t, std::size_t>{16, 2});
  CHECK(plan("blocks.0.query.weight", 8, 12) == std::pair<std::size_t, std::size_t>{4, 1});
  CHECK(plan("blocks.1.query.weight", 8, 12) == std::pair<std::size_t, std::size_t>{4096, 6});

  PlanSpec odd;
  odd.dim = 3;
  odd.bits = 0.5;
  CHECK_THROWS_AS(resolve_plan(odd), ConfigError);
  PlanSpec none;
  CHECK_THROWS_AS(resolve_plan(none), ConfigError);
  PlanSpec bad;
  bad.overrides = {"fc1=16by2"};
  CHECK_THROWS_AS(resolve_plan(bad), ConfigError);
}

TEST_CASE("plan diagnostics name every unusable layer") {
  const DiTModel m = make_toy_model(toy_config(), 1);
  PlanSpec spec;
  spec.dim = 3;
  spec.bits = 2.0;
  CHECK(plan_diagnostics(m, resolve_plan(spec)).size() == 8);
  spec.dim = 2;
  spec.bits = 3.0;
  CHECK(plan_diagnostics(m, resolve_plan(spec)).empty());
}

TEST_CASE("model and trajectory cache containers roundtrip") {
  const DiTModel m = make_toy_model(toy_config(), 2);
  const DiTModel back = model_from_container(parse_container(write_container(model_to_container(m))));
  CHECK(back.config == m.config);
  const auto a = m.named_tensors();
  const auto b = back.named_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.values() == b[i].second.values());

  const auto cache = build_trajectory_cache(m, 2, 3);
  const auto restored = cache_from_container(parse_container(write_container(cache_to_container(cache))));
  REQUIRE(restored.size() == 2);
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(restored.trajectories[j].y == cache.trajectories[j].y);
    for (std::size_t t = 1; t <= 4; ++t) {
      CHECK(restored.step(j, t).z_t.values() == cache.step(j, t).z_t.values());
      CHECK(restored.step(j, t).blocks.outputs[0].values() == cache.step(j, t).blocks.outputs[0].values());
    }
  }
}

TEST_CASE("quantized toy model: lossless storage and size accounting") {
  const DiTModel fp = make_toy_model(toy_config(), 3);
  PlanSpec spec;
  spec.preset = "3bit";
  const auto layers = init_quant_layers(fp, resolve_plan(spec), 2, 4);
  const auto file = make_quantized_file(fp, layers);
  const auto bytes = write_quantized(file);
  const auto back = read_quantized(bytes);
  CHECK(back == file);

  const DiTModel q = model_from_quantized(back);
  const auto weights = hard_weights(layers);
  std::uint64_t layer_bytes = 0;
  for (const auto& st : layers) {
    const auto rep = storage_report(st.shape);
    layer_bytes += (rep.assignment_bits + 7) / 8 + rep.codebook_bits / 8;
  }
  std::uint64_t passthrough_bytes = 0;
  for (const auto& [name, e] : file.passthrough) passthrough_bytes += e.bytes.size();
  std::uint64_t header = 0;
  for (int i = 0; i < 8; ++i) header |= static_cast<std::uint64_t>(bytes[8 + static_cast<std::size_t>(i)]) << (8 * i);
  // Alignment adds at most 7 bytes per stored range.
  const std::uint64_t ranges = 2 * layers.size() + file.passthrough.size();
  CHECK(bytes.size() >= 16 + header + layer_bytes + passthrough_bytes);
  CHECK(bytes.size() <= 16 + header + layer_bytes + passthrough_bytes + 7 * ranges);

  for (const auto& [name, t] : q.named_tensors()) {
    if (is_block_weight(name)) CHECK(t.to_matrix() == weights.at(name));
  }
}

TEST_CASE("candidate sidecar roundtrip and validation") {
  const DiTModel fp = make_toy_model(toy_config(), 4);
  PlanSpec spec;
  spec.preset = "3bit";
  auto layers = init_quant_layers(fp, resolve_plan(spec), 3, 5);
  layers[0].candidates.logits[0] = 1.25F;
  const auto sidecar = parse_container(write_container(candidates_to_container(layers)));
  auto copy = layers;
  for (auto& st : copy) st.candidates = CandidateSet{};
  apply_candidates(copy, sidecar);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    CHECK(copy[l].candidates.candidates == layers[l].candidates.candidates);
    CHECK(copy[l].candidates.logits == layers[l].candidates.logits);
  }
  auto broken = sidecar;
  std::vector<float> ids = broken.tensors.begin()->second.to_f32();
  ids[0] = 1e6F;
  broken.tensors.begin()->second = TensorEntry::from_f32(broken.tensors.begin()->second.shape, ids);
  CHECK_THROWS_AS(apply_candidates(copy, broken), InputError);
}

TEST_CASE("exit codes follow the error kind") {
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(InputError("x")) == 2);
  CHECK(exit_code_for(NumericalError("x")) == 3);
  CHECK(exit_code_for(CalibrationDiverged("x", {})) == 3);
}

TEST_CASE("cli end to end") {
  ScratchDir dir("pipeline");
  const std::string fp = dir / "fp.dvt";
  REQUIRE(run_cli(kCli, "make-toy-model " + kToyFlags + " --seed 7 --out " + fp).exit_code == 0);

  SUBCASE("quantize is reproducible and prints the storage table") {
    const auto r = run_cli(kCli, "quantize --model " + fp + " --preset 3bit --out " + (dir / "a.dvq"));
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("codebook MB") != std::string::npos);
    CHECK(r.output.find("64x2") != std::string::npos);
    REQUIRE(run_cli(kCli, "quantize --model " + fp + " --preset 3bit --out " + (dir / "b.dvq")).exit_code == 0);
    CHECK(read_file(dir / "a.dvq") == read_file(dir / "b.dvq"));
    CHECK(read_file(dir / "a.dvq.candidates") == read_file(dir / "b.dvq.candidates"));
  }

  SUBCASE("calibrate, eval and report") {
    const std::string q = dir / "q.dvq";
    const std::string cal = dir / "cal.dvq";
    REQUIRE(run_cli(kCli, "quantize --model " + fp + " --preset 3bit --out " + q).exit_code == 0);
    const auto c = run_cli(kCli, "calibrate --model " + fp + " --quantized " + q + " --out " + cal +
                                     " --iters 6 --batch 2 --cache_size 4 --grad_report " + (dir / "grad.json"));
    INFO(c.output);
    REQUIRE(c.exit_code == 0);
    CHECK(count_lines(read_text(cal + ".log.jsonl")) == 6);

    const auto e = run_cli(kCli, "eval --model " + fp + " --quantized vq=" + q + " --quantized cal=" + cal +
                                     " --quantized fp=" + fp + " --uq_bits 3 --eval_trajectories 2 --latent_samples 1 --out " +
                                     (dir / "eval.json"));
    INFO(e.output);
    REQUIRE(e.exit_code == 0);
    const auto report = nlohmann::json::parse(read_text(dir / "eval.json"));
    REQUIRE(report["rows"].size() == 4);
    const auto& fp_row = report["rows"][3];
    CHECK(fp_row["label"] == "fp");
    CHECK(fp_row["mean_weight_mse"].get<double>() == 0.0);
    CHECK(fp_row["mean_block_output_mse"].get<double>() == 0.0);
    CHECK(fp_row["final_latent_mse"].get<double>() == 0.0);
    CHECK(report["rows"][1]["bits_per_weight"].get<double>() == doctest::Approx(3.0));

    const std::string out_dir = dir / "report";
    const auto r = run_cli(kCli, "report --log " + cal + ".log.jsonl --quantized " + cal + " --grad_report " +
                                     (dir / "grad.json") + " --out_dir " + out_dir);
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    CHECK(count_lines(read_text(out_dir + "/loss_curve.csv")) == 1 + 6);
    std::istringstream positions(read_text(out_dir + "/positions.csv"));
    std::string line;
    std::getline(positions, line);
    CHECK(line == "layer,position_1,position_2");
    while (std::getline(positions, line)) {
      double total = 0.0;
      std::istringstream cells(line);
      std::string cell;
      std::getline(cells, cell, ',');
      while (std::getline(cells, cell, ',')) total += std::stod(cell);
      CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(count_lines(read_text(out_dir + "/grad_cosine.csv")) == 21);
  }

  SUBCASE("n = 1 gives a single-bar position histogram") {
    const std::string q = dir / "q1.dvq";
    REQUIRE(run_cli(kCli, "quantize --model " + fp + " --preset 3bit --n 1 --out " + q).exit_code == 0);
    REQUIRE(run_cli(kCli, "calibrate --model " + fp + " --quantized " + q + " --out " + (dir / "c1.dvq") +
                              " --n 1 --iters 2 --batch 1 --cache_size 2")
                .exit_code == 0);
    REQUIRE(run_cli(kCli, "report --log " + (dir / "c1.dvq.log.jsonl") + " --quantized " + (dir / "c1.dvq") +
                              " --out_dir " + (dir / "r1"))
                .exit_code == 0);
    const std::string text = read_text(dir / "r1/positions.csv");
    CHECK(text.find("layer,position_1\n") == 0);
    CHECK(text.find("all,1.0\n") != std::string::npos);
  }

  SUBCASE("mode none only finalizes") {
    const std::string q = dir / "q.dvq";
    REQUIRE(run_cli(kCli, "quantize --model " + fp + " --preset 3bit --out " + q).exit_code == 0);
    REQUIRE(run_cli(kCli, "calibrate --model " + fp + " --quantized " + q + " --out " + (dir / "none.dvq") +
                              " --mode none --cache_size 1")
                .exit_code == 0);
    CHECK(read_file(q) == read_file(dir / "none.dvq"));
  }

  SUBCASE("configuration and input errors exit with 2") {
    CHECK(run_cli(kCli, "quantize --model " + fp + " --d 3 --bits 2 --out " + (dir / "x.dvq")).exit_code == 2);
    CHECK(run_cli(kCli, "quantize --model " + (dir / "missing.dvt") + " --preset 2bit --out " + (dir / "x.dvq")).exit_code == 2);
    CHECK(run_cli(kCli, "quantize --model " + fp + " --preset 5bit --out " + (dir / "x.dvq")).exit_code == 2);
    CHECK(run_cli(kCli, "quantize --no_such_flag").exit_code == 2);
    CHECK(run_cli(kCli, "report --log " + (dir / "missing.jsonl") + " --out_dir " + (dir / "r")).exit_code == 2);

    // A quantized model built from a different configuration.
    const std::string other = dir / "other.dvt";
    REQUIRE(run_cli(kCli, "make-toy-model --depth 1 --hidden 16 --heads 2 --tokens 4 --classes 3 --timesteps 6 --out " + other).exit_code == 0);
    REQUIRE(run_cli(kCli, "quantize --model " + other + " --preset 3bit --out " + (dir / "o.dvq")).exit_code == 0);
    CHECK(run_cli(kCli, "eval --model " + fp + " --quantized o=" + (dir / "o.dvq") + " --eval_trajectories 1").exit_code == 2);
    CHECK(run_cli(kCli, "calibrate --model " + fp + " --quantized " + (dir / "o.dvq") + " --out " + (dir / "x.dvq")).exit_code == 2);
  }

  SUBCASE("numerical failure exits with 3 and leaves a log") {
    const std::string q = dir / "q.dvq";
    REQUIRE(run_cli(kCli, "quantize --model " + fp + " --preset 3bit --out " + q).exit_code == 0);
    const auto r = run_cli(kCli, "calibrate --model " + fp + " --quantized " + q + " --out " + (dir / "d.dvq") +
                                     " --iters 5 --batch 1 --cache_size 2 --lr_codebook 1e30");
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("snapshot") != std::string::npos);
    CHECK(std::filesystem::exists(dir / "d.dvq.log.jsonl"));
  }

  SUBCASE("config file supplies flags") {
    const std::string cfg = dir / "run.toml";
    std::ofstream(cfg) << "[quantize]\npreset = \"3bit\"\nseed = 5\n";
    REQUIRE(run_cli(kCli, "--config " + cfg + " quantize --model " + fp + " --out " + (dir / "cfg.dvq")).exit_code == 0);
    REQUIRE(run_cli(kCli, "quantize --model " + fp + " --preset 3bit --seed 5 --out " + (dir / "flags.dvq")).exit_code == 0);
    CHECK(read_file(dir / "cfg.dvq") == read_file(dir / "flags.dvq"));
  }

  SUBCASE("inspect and bench") {
    const auto i = run_cli(kCli, "inspect " + fp);
    CHECK(i.exit_code == 0);
    CHECK(i.output.find("tensor container") != std::string::npos);
    const auto b = run_cli(kCli, "bench --size 32x64:16x4:2 --repetitions 1 --out " + (dir / "bench.jsonl"));
    CHECK(b.exit_code == 0);
    CHECK(count_lines(read_text(dir / "bench.jsonl")) == 1);
    CHECK(run_cli(kCli, "bench --size 32x64 --repetitions 1").exit_code == 2);
  }
}

TEST_CASE("trajectory cache directory is reused") {
  ScratchDir dir("cache");
  const DiTModel m = make_toy_model(toy_config(), 6);
  const auto a = cached_trajectories(m, 2, 9, 1.0, dir.path());
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  CHECK(files == 1);
  const auto b = cached_trajectories(m, 2, 9, 1.0, dir.path());
  CHECK(b.step(1, 2).blocks.outputs[0].values() == a.step(1, 2).blocks.outputs[0].values());
  CHECK(resolve_cache_dir("x") == std::optional<fs::path>{"x"});
}
