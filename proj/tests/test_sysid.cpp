#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "pneudrive/sysid.hpp"

using namespace pneudrive;
using namespace pneudrive::sysid;

namespace {

Dataset linear_data(double duration, std::uint64_t seed = 3) {
  GenerateOptions g;
  g.duration = duration;
  g.seed = seed;
  return generate_dataset(control::uniform_device_config(dynamics::LinearParams{3.0, 3.2}), g);
}

Dataset nonlinear_data(double duration, double noise = 0.0) {
  auto device = control::default_device_config();
  device.joint.amplitude = {0.25, 0.15};
  device.joint.frequency_hz = {0.13, 0.07};
  GenerateOptions g;
  g.duration = duration;
  g.seed = 11;
  g.noise_fraction = noise;
  return generate_dataset(device, g);
}

std::string csv_of(const Dataset& d) {
  std::ostringstream out;
  write_dataset_csv(out, d);
  return out.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::string join(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + '\n';
  return out;
}

std::string set_field(const std::string& line, std::size_t field, const std::string& value) {
  std::vector<std::string> cells;
  std::istringstream in(line);
  for (std::string cell; std::getline(in, cell, ',');) cells.push_back(cell);
  cells.at(field) = value;
  std::string out;
  for (std::size_t c = 0; c < cells.size(); ++c) out += (c ? "," : "") + cells[c];
  return out;
}

std::optional<std::size_t> load_error_row(const std::string& text) {
  std::istringstream in(text);
  try {
    load_dataset(in);
  } catch (const DataError& e) {
    return e.row().value_or(0);
  }
  return std::nullopt;
}

}  // namespace

TEST_CASE("dataset CSV round trip") {
  const auto d = linear_data(2.0);
  std::istringstream in(csv_of(d));
  const auto back = load_dataset(in);
  REQUIRE(back.size() == d.size());
  CHECK(back.dt == doctest::Approx(d.dt));
  CHECK(back.sample_rate() == doctest::Approx(100.0));
  for (std::size_t k = 0; k < d.size(); k += 17) {
    for (std::size_t i = 0; i < kChambers; ++i) {
      CHECK(back.p[k][i] == doctest::Approx(d.p[k][i]).epsilon(1e-8));
      CHECK(back.p_cmd[k][i] == doctest::Approx(d.p_cmd[k][i]).epsilon(1e-8));
    }
  }
  const auto log = dataset_to_log(back);
  CHECK(dataset_from_log(log, back.dt).size() == back.size());
}

TEST_CASE("dataset load errors name the row") {
  const auto lines = lines_of(csv_of(linear_data(1.0)));
  REQUIRE(lines.size() == 101);

  SUBCASE("gap of two steps") {
    auto bad = lines;
    bad.erase(bad.begin() + 40);  // file line 41
    const auto row = load_error_row(join(bad));
    REQUIRE(row);
    CHECK(*row == 41);
  }
  SUBCASE("NaN value") {
    auto bad = lines;
    bad[10] = set_field(bad[10], 6, "nan");
    const auto row = load_error_row(join(bad));
    REQUIRE(row);
    CHECK(*row == 11);
  }
  SUBCASE("text value") {
    auto bad = lines;
    bad[20] = set_field(bad[20], 9, "12x");
    CHECK(load_error_row(join(bad)) == std::optional<std::size_t>(21));
  }
  SUBCASE("missing column") {
    auto bad = lines;
    bad[0].replace(bad[0].find("p2_kPa"), 6, "px_kPa");
    const auto row = load_error_row(join(bad));
    REQUIRE(row);
    CHECK(*row == 1);
  }
  SUBCASE("short row") {
    auto bad = lines;
    bad[57] = bad[57].substr(0, bad[57].rfind(','));
    const auto row = load_error_row(join(bad));
    REQUIRE(row);
    CHECK(*row == 58);
  }
  SUBCASE("empty input") { CHECK(load_error_row("") == std::optional<std::size_t>(1)); }
  SUBCASE("message carries the row") {
    auto bad = lines;
    bad.erase(bad.begin() + 40);
    std::istringstream in(join(bad));
    try {
      load_dataset(in);
      FAIL("expected a data error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("row 41") != std::string::npos);
    }
  }
  CHECK_THROWS_AS(load_dataset_file("/nonexistent/data.csv"), DataError);
}

TEST_CASE("train and validation split") {
  const auto d = linear_data(220.0);
  REQUIRE(d.size() == 22000);
  const auto [train, validation] = split_dataset(d, 20000);
  CHECK(train.size() == 20000);
  CHECK(validation.size() == 2000);
  CHECK(validation.t.front() == doctest::Approx(train.t.back() + d.dt));
  CHECK(validation.dt == d.dt);
  CHECK_THROWS(split_dataset(d, 22001));
}

TEST_CASE("central differences") {
  std::vector<double> x;
  for (int k = 0; k < 20; ++k) x.push_back(3.0 * k * 0.1 * k * 0.1 - k * 0.1);
  const auto d = central_difference(x, 0.1);
  REQUIRE(d.size() == x.size());
  for (std::size_t k = 0; k < d.size(); ++k) CHECK(d[k] == doctest::Approx(6.0 * k * 0.1 - 1.0).epsilon(1e-9));
}

TEST_CASE("metric identities") {
  std::vector<double> measured;
  for (int k = 0; k < 2000; ++k) measured.push_back(2e5 + 5e4 * std::sin(0.01 * k));
  const double dt = 0.01;

  const auto same = metrics(measured, measured, dt);
  CHECK(same.r_squared == 1.0);
  CHECK(same.r_squared_pdot == 1.0);
  CHECK(same.iae == 0.0);

  auto offset = measured;
  for (double& v : offset) v += 1e3;
  CHECK(metrics(offset, measured, dt).iae == doctest::Approx(20000.0));
  CHECK(metrics(offset, measured, dt).sum_abs_error_gpa == doctest::Approx(2000 * 1e3 * 1e-9));

  auto doubled = measured;
  for (double& v : doubled) v += 2e3;
  CHECK(metrics(doubled, measured, dt).iae == doctest::Approx(2.0 * metrics(offset, measured, dt).iae));

  double mean = 0.0;
  for (double v : measured) mean += v;
  mean /= measured.size();
  const std::vector<double> flat(measured.size(), mean);
  CHECK(r_squared(flat, measured) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r_squared(measured, std::vector<double>(measured.size(), 7.0)) == 0.0);
  CHECK(r_squared(std::vector<double>(3, 7.0), std::vector<double>(3, 7.0)) == 1.0);

  // Affine rescaling of both series leaves R^2 unchanged.
  auto scaled_m = measured, scaled_p = offset;
  for (double& v : scaled_m) v = 3.0 * v + 10.0;
  for (double& v : scaled_p) v = 3.0 * v + 10.0;
  CHECK(r_squared(scaled_p, scaled_m) == doctest::Approx(r_squared(offset, measured)).epsilon(1e-9));

  CHECK_THROWS_AS(metrics(std::vector<double>(3), std::vector<double>(4), dt), std::invalid_argument);
}

TEST_CASE("measurement noise scales with pressure") {
  const auto d = linear_data(50.0);
  const auto noisy = with_measurement_noise(d, 0.01, 5);
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < d.size(); ++k) {
    for (std::size_t i = 0; i < kChambers; ++i) {
      const double z = (noisy.p[k][i] - d.p[k][i]) / (0.01 * d.p[k][i]);
      sum += z;
      sum_sq += z * z;
      ++n;
    }
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::sqrt(sum_sq / n) == doctest::Approx(1.0).epsilon(0.03));
  CHECK(noisy.p_cmd == d.p_cmd);
}

TEST_CASE("open-loop prediction") {
  Dataset d;
  d.dt = 0.01;
  for (int k = 0; k < 300; ++k) {
    d.t.push_back(k * d.dt);
    d.p.push_back({1e5, 1e5, 1e5, 1e5});
    d.p_cmd.push_back({3e5, 3e5, 3e5, 3e5});
    d.u.push_back({});
    d.joint.push_back({});
  }
  const auto pred = predict_open_loop(dynamics::LinearParams{2.0, 2.0}, d, 1);
  REQUIRE(pred.size() == d.size());
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double exact = 3e5 + (1e5 - 3e5) * std::exp(-2.0 * d.t[k]);
    CHECK(pred[k] == doctest::Approx(exact).epsilon(1e-8));
  }
  CHECK(predict_open_loop(dynamics::LinearParams{}, Dataset{}, 0).empty());
  CHECK_THROWS_AS(predict_open_loop(dynamics::LinearParams{}, d, 4), std::out_of_range);

  const auto gen = linear_data(20.0);
  const auto replay = predict_open_loop(dynamics::LinearParams{3.0, 3.2}, gen, 2);
  for (std::size_t k = 0; k < gen.size(); ++k) CHECK(replay[k] == doctest::Approx(gen.p[k][2]).epsilon(1e-12));
}

TEST_CASE("parameter space round trip") {
  for (auto kind : {ModelKind::linear, ModelKind::nonlinear, ModelKind::parametric}) {
    const ParameterSpace space(kind, context_for(kind, FitOptions{}));
    std::vector<double> z(space.size());
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = (j + 1.0) / (z.size() + 2.0);
    const auto back = space.encode(space.decode(z));
    for (std::size_t j = 0; j < z.size(); ++j) CHECK(back[j] == doctest::Approx(z[j]).epsilon(1e-9));
    for (const auto& s : space.specs()) {
      CHECK(s.lower <= s.init_lower);
      CHECK(s.init_upper <= s.upper);
    }
    CHECK(to_json(space).size() == space.size());
  }
}

TEST_CASE("linear fit recovers the generating parameters") {
  const auto d = linear_data(60.0);
  FitOptions opts;
  opts.n_restarts = 5;
  for (std::size_t chamber = 0; chamber < kChambers; ++chamber) {
    const auto r = fit(ModelKind::linear, d, chamber, opts);
    const auto& p = std::get<dynamics::LinearParams>(r.params);
    CHECK(p.alpha == doctest::Approx(3.0).epsilon(0.01));
    CHECK(p.beta == doctest::Approx(3.2).epsilon(0.01));
    CHECK(r.r_squared > 0.99);
    CHECK(r.n_converged <= r.n_restarts);
    CHECK(r.iae >= 0.0);
  }
}

TEST_CASE("fits are deterministic and best-of-k is monotone") {
  const auto d = linear_data(20.0);
  FitOptions opts;
  opts.n_restarts = 4;
  opts.seed = 99;
  const auto a = fit(ModelKind::linear, d, 0, opts);
  const auto b = fit(ModelKind::linear, d, 0, opts);
  CHECK(to_json(a).dump() == to_json(b).dump());
  opts.threads = 3;
  const auto c = fit(ModelKind::linear, d, 0, opts);
  CHECK(to_json(a).dump() == to_json(c).dump());

  const auto noisy = with_measurement_noise(nonlinear_data(20.0), 0.01, 4);
  FitOptions few;
  few.seed = 7;
  double previous = -1e300;
  for (std::size_t k = 1; k <= 4; ++k) {
    few.n_restarts = k;
    try {
      const auto r = fit(ModelKind::parametric, noisy, 1, few);
      CHECK(r.r_squared >= previous);
      previous = r.r_squared;
    } catch (const FitError&) {
      CHECK(previous == -1e300);
    }
  }
  CHECK(restart_seed(99, 3) == restart_seed(99, 3));
  CHECK(restart_seed(99, 3) != restart_seed(99, 4));
}

TEST_CASE("no converged restart is a fit error") {
  const auto d = linear_data(5.0);
  FitOptions opts;
  opts.n_restarts = 3;
  opts.lm.max_iterations = 1;
  opts.lm.ftol = 0.0;
  opts.lm.xtol = 0.0;
  opts.lm.gtol = 0.0;
  try {
    fit(ModelKind::linear, d, 0, opts);
    FAIL("expected a fit error");
  } catch (const FitError& e) {
    CHECK(e.diagnostics()["restarts"].size() == 3);
  }
  CHECK_THROWS_AS(fit(ModelKind::linear, Dataset{}, 0, opts), DataError);
}

TEST_CASE("nonlinear fit on moving-joint data predicts open loop") {
  const auto all = nonlinear_data(40.0);
  const auto [train, validation] = split_dataset(all, 3000);
  FitOptions opts;
  opts.n_restarts = 3;
  const auto r = fit(ModelKind::nonlinear, train, 0, opts);
  const auto pred = predict_open_loop(r.params, validation, 0);
  const auto m = metrics(pred, validation.pressure(0), validation.dt);
  CHECK(m.r_squared > 0.99);
}

TEST_CASE("parametric fit matches the golden result") {
  const auto noisy = with_measurement_noise(nonlinear_data(30.0), 0.01, 21);
  FitOptions opts;
  opts.n_restarts = 20;
  opts.seed = 2024;
  const auto r = fit(ModelKind::parametric, noisy, 2, opts);
  const auto doc = to_json(r);
  const std::string path = std::string(PNEUDRIVE_GOLDEN_DIR) + "/parametric_fit.json";

  if (std::getenv("PNEUDRIVE_UPDATE_GOLDEN")) {
    std::ofstream(path) << doc.dump(2) << '\n';
    return;
  }
  std::ifstream in(path);
  REQUIRE(in.good());
  const auto golden = nlohmann::json::parse(in);
  CHECK(doc["n_restarts"] == golden["n_restarts"]);
  CHECK(doc["n_converged"] == golden["n_converged"]);
  CHECK(doc["best_restart_index"] == golden["best_restart_index"]);
  CHECK(doc["best_restart_seed"] == golden["best_restart_seed"]);
  CHECK(doc["r_squared_pdot_train"].get<double>() == doctest::Approx(golden["r_squared_pdot_train"].get<double>()).epsilon(1e-6));
  const auto& got = doc["params"];
  const auto& want = golden["params"];
  REQUIRE(got.size() == want.size());
  for (auto it = want.begin(); it != want.end(); ++it) {
    if (!it->is_number()) continue;
    CHECK(got[it.key()].get<double>() == doctest::Approx(it->get<double>()).epsilon(1e-6));
  }
  CHECK(r.n_converged >= 1);
  for (const auto& o : r.restarts) {
    if (o.converged) CHECK(o.r_squared_pdot <= r.r_squared);
  }
}
