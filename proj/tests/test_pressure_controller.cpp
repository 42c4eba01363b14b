#include <doctest.h>

#include <array>
#include <cmath>
#include <fstream>
#include <filesystem>
#include <string>

#include "pneudrive/pressure_controller.hpp"

using namespace pneudrive;

namespace {

const double kLsb = 689.48 / 1023.0;  // kPa per payload word


}  // namespace

TEST_CASE("scripting listing runs against four simulated devices") {
  const int num_devices = 4;
  PressureController my_controller("sim", num_devices);
  my_controller.ping_devices();

  const std::array<double, 4> pressure_cmd{1, 2, 3, 4};
  for (int i = 0; i < num_devices; ++i) {
    my_controller.set_pressure_commands(i, pressure_cmd);
    const auto data = my_controller.get_pressure_data(i);
    for (double v : data) CHECK(std::isfinite(v));
  }
}

TEST_CASE("ping names the missing device") {
  PressureController ctl("sim:3", 4);
  try {
    ctl.ping_devices();
    FAIL("ping succeeded with a device missing");
  } catch (const DeviceError& e) {
    CHECK(e.address() == 0xFFFC);
    CHECK(std::string(e.what()).find("0xFFFC") != std::string::npos);
  }
}

TEST_CASE("constructor validation") {
  CHECK_THROWS_AS(PressureController("sim", 0), std::invalid_argument);
  CHECK_THROWS_AS(PressureController("sim", 257), std::invalid_argument);
  CHECK_THROWS_AS(PressureController("sim:0", 1), std::invalid_argument);
  CHECK_THROWS_AS(PressureController("sim:x", 1), std::invalid_argument);
  CHECK_THROWS_AS(PressureController("/nonexistent/rig.json", 1), std::invalid_argument);
  CHECK_THROWS_AS(PressureController("/dev/null", 1), std::runtime_error);
}

TEST_CASE("simulation config file as port") {
  const auto path = std::filesystem::temp_directory_path() / "pneudrive_rig.json";
  {
    std::ofstream out(path);
    out << R"({"devices_present": 2, "seed": 5})";
  }
  PressureController ctl(path.string(), 2);
  CHECK_NOTHROW(ctl.ping_devices());
  PressureController short_bus(path.string(), 3);
  CHECK_THROWS_AS(short_bus.ping_devices(), DeviceError);
  std::filesystem::remove(path);
}

TEST_CASE("index bounds") {
  PressureController ctl("sim", 2);
  const std::array<double, 4> cmd{10, 10, 10, 10};
  CHECK_THROWS_AS(ctl.set_pressure_commands(2, cmd), std::out_of_range);
  CHECK_THROWS_AS(ctl.get_pressure_data(-1), std::out_of_range);
  CHECK_THROWS_AS(ctl.get_pressure_data(2), std::out_of_range);
  const std::array<double, 3> short_cmd{1, 2, 3};
  CHECK_THROWS_AS(ctl.set_pressure_commands(0, short_cmd), std::invalid_argument);
}

TEST_CASE("pressures converge toward the command") {
  // Proportional control leaves a few kPa of offset near atmosphere, where the
  // exhaust flow vanishes; the check is that the error keeps shrinking.
  PressureController ctl("sim", 1);
  const std::array<double, 4> cmd{1, 2, 3, 4};
  ctl.set_pressure_commands(0, cmd);
  auto previous = ctl.get_pressure_data(0);
  const auto first = previous;
  for (int step = 0; step < 4; ++step) {
    ctl.advance(0.5);
    const auto now = ctl.get_pressure_data(0);
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(now[c] - cmd[c]) <= std::abs(previous[c] - cmd[c]) + kLsb);
    previous = now;
  }
  for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(previous[c] - cmd[c]) < 0.25 * std::abs(first[c] - cmd[c]));
}

TEST_CASE("commands are clamped to the sensor range") {
  PressureController ctl("sim", 1);
  const std::array<double, 4> cmd{-5, 800, 100, 100};
  ctl.set_pressure_commands(0, cmd);
  auto& dev = dynamic_cast<control::EmulatedDevice&>(ctl.bus().device(0));
  const auto& targets = dev.targets();
  CHECK(control::pa_to_gauge_kpa(targets[0]) == doctest::Approx(0.0));
  CHECK(control::pa_to_gauge_kpa(targets[1]) == doctest::Approx(689.48));
  CHECK(std::abs(control::pa_to_gauge_kpa(targets[2]) - 100.0) <= kLsb);
}

TEST_CASE("one bus transaction per call") {
  PressureController ctl("sim", 3);
  const std::array<double, 4> cmd{5, 5, 5, 5};
  ctl.ping_devices();
  CHECK(ctl.transactions() == 3);
  ctl.set_pressure_commands(1, cmd);
  CHECK(ctl.transactions() == 4);
  const double t = ctl.bus().now();
  ctl.get_pressure_data(1);
  ctl.get_pressure_data(1);
  CHECK(ctl.transactions() == 6);
  CHECK(ctl.bus().now() > t);
}

TEST_CASE("shipped rig configs") {
  const std::string dir = PNEUDRIVE_CONFIG_DIR;
  PressureController full(dir + "/rig_4_devices.json", 4);
  CHECK_NOTHROW(full.ping_devices());
  PressureController short_bus(dir + "/rig_3_devices.json", 4);
  CHECK_THROWS_WITH_AS(short_bus.ping_devices(), doctest::Contains("0xFFFC"), DeviceError);
}
