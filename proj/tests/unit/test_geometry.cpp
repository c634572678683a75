#include <cmath>
#include <filesystem>
#include <fstream>

#include "beamloc/error.hpp"
#include "beamloc/geometry.hpp"
#include "beamloc/random.hpp"
#include "doctest.h"

using namespace beamloc;

TEST_SUITE("geometry") {
  TEST_CASE("default array satisfies the rig invariants") {
    const ArrayGeometry g = default_ava_array();
    CHECK_NOTHROW(validate_ava_geometry(g));
    REQUIRE(g.size() == 16);
    double xmin = 1e9, xmax = -1e9, ymin = 1e9, ymax = -1e9;
    for (const auto& p : g.mic_positions) {
      xmin = std::min(xmin, p.x);
      xmax = std::max(xmax, p.x);
      ymin = std::min(ymin, p.y);
      ymax = std::max(ymax, p.y);
      CHECK(p.z == g.mic_positions.front().z);
    }
    CHECK(std::abs((xmax - xmin) - 0.450) < 1e-9);
    CHECK(ymax - ymin <= 0.040 + 1e-12);

    const auto [left, right] = ortf_pair_indices(g);
    CHECK(g.mic_positions[left].x == doctest::Approx(-0.0883).epsilon(1e-12));
    CHECK(g.mic_positions[right].x == doctest::Approx(0.0883).epsilon(1e-12));
    CHECK(g.mic_positions[left].y == 0.0);
    CHECK(g.mic_positions[right].y == 0.0);

    for (std::size_t i = 1; i < g.size(); ++i) CHECK(g.mic_positions[i].x > g.mic_positions[i - 1].x);
    const std::size_t c = center_mic_index(g);
    CHECK(std::abs(g.mic_positions[c].x) == doctest::Approx(0.010));
  }

  TEST_CASE("geometry validation rejects broken arrays") {
    ArrayGeometry g = default_ava_array();
    g.mic_positions.pop_back();
    CHECK_THROWS_AS(validate_ava_geometry(g), InputError);
    g = default_ava_array();
    g.mic_positions[3] = g.mic_positions[4];
    CHECK_THROWS_AS(validate_ava_geometry(g), InputError);
    g = default_ava_array();
    g.mic_positions[2].y = 0.05;
    CHECK_THROWS_AS(validate_ava_geometry(g), InputError);
  }

  TEST_CASE("broadside delays are equal, endfire spans the aperture") {
    const ArrayGeometry g = default_ava_array();
    const auto d0 = steering_delays(g, 0.0, 0.0);
    for (double d : d0) CHECK(d == d0.front());
    const auto d90 = steering_delays(g, 90.0, 0.0);
    const auto [lo, hi] = std::minmax_element(d90.begin(), d90.end());
    CHECK(*hi - *lo == doctest::Approx(0.450 / 343.0).epsilon(1e-12));
    // the mic nearest the source (largest x) hears it first
    CHECK(d90.back() == *lo);
    CHECK_THROWS_AS(steering_delays(g, 91.0, 0.0), DomainError);
  }

  TEST_CASE("steering delays are antisymmetric under mirrored mic order") {
    const ArrayGeometry g = default_ava_array();
    Rng rng = make_rng(7);
    for (int trial = 0; trial < 50; ++trial) {
      const double az = uniform(rng, -90.0, 90.0);
      const auto plus = steering_delays(g, az);
      const auto minus = steering_delays(g, -az);
      for (std::size_t i = 0; i < g.size(); ++i) {
        CHECK(std::abs(plus[g.size() - 1 - i] - minus[i]) < 1e-15);
      }
    }
  }

  TEST_CASE("camera anchors: 2 deg is 89 px, 5 deg is 222 +- 1 px") {
    const CameraModel cam;
    CHECK(std::abs(azimuth_to_pixel(cam, 2.0) - cam.principal_x_px - 89.0) < 1e-9);
    CHECK(std::abs(azimuth_to_pixel(cam, -2.0) - cam.principal_x_px + 89.0) < 1e-9);
    const double five = azimuth_to_pixel(cam, 5.0) - cam.principal_x_px;
    CHECK(std::abs(five - 222.0) <= 1.0);
    CHECK(azimuth_to_pixel(cam, 0.0) == cam.principal_x_px);
    CHECK(cam.focal_px == doctest::Approx(2548.6).epsilon(1e-4));
  }

  TEST_CASE("pixel <-> azimuth round trip") {
    CameraModel cam;
    cam.principal_x_px = 1100.0;
    for (double az = -89.0; az <= 89.0; az += 0.37) {
      CHECK(std::abs(pixel_to_azimuth(cam, azimuth_to_pixel(cam, az)) - az) < 1e-9);
    }
    CHECK_THROWS_AS(azimuth_to_pixel(cam, 90.0), DomainError);
    CHECK_THROWS_AS(azimuth_to_pixel(cam, -90.0), DomainError);
  }

  TEST_CASE("look direction presets") {
    const auto d15 = default_look_directions();
    CHECK(d15.size() == 15);
    CHECK(d15.azimuths_deg() ==
          std::vector<double>{-45, -30, -25, -20, -15, -10, -5, 0, 5, 10, 15, 20, 25, 30, 45});
    CHECK(look_direction_preset(3).azimuths_deg() == std::vector<double>{-20, 0, 20});
    CHECK(look_direction_preset(7).azimuths_deg() == std::vector<double>{-45, -30, -15, 0, 15, 30, 45});
    CHECK_THROWS_AS(look_direction_preset(5), InputError);
    CHECK_THROWS_AS(LookDirectionSet({0, 0}), InputError);
    CHECK_THROWS_AS(LookDirectionSet({10, 0}), InputError);
  }

  TEST_CASE("geometry and camera files round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "beamloc_geom_test";
    std::filesystem::create_directories(dir);
    const ArrayGeometry g = default_ava_array();
    save_geometry(dir / "array.txt", g);
    const ArrayGeometry back = load_geometry(dir / "array.txt");
    CHECK(back.mic_positions == g.mic_positions);
    CHECK(back.speed_of_sound == g.speed_of_sound);

    std::vector<CameraModel> cams(2);
    cams[1].view_id = 4;
    cams[1].principal_x_px = 300.5;
    save_cameras(dir / "cams.txt", cams);
    const auto cb = load_cameras(dir / "cams.txt");
    REQUIRE(cb.size() == 2);
    CHECK(cb[1].view_id == 4);
    CHECK(cb[1].principal_x_px == 300.5);
    CHECK(cb[0].focal_px == cams[0].focal_px);

    std::ofstream(dir / "bad.txt") << "0 0.1 0.2\n";
    CHECK_THROWS_AS(load_geometry(dir / "bad.txt"), FormatError);
    std::ofstream(dir / "badcam.txt") << "11 2448 2048 2500 1224\n";
    CHECK_THROWS_AS(load_cameras(dir / "badcam.txt"), FormatError);
  }
}
