// Full-size preset, shapes only. Allocates about 1.4 GB of parameters.
#include "doctest.h"
#include "kbub/koopman.hpp"

using namespace kbub;
using ad::Shape;

TEST_CASE("paper-scale preset layer shapes") {
  const std::vector<ShapeRow> expected = {
      {"Input", {1, 100, 100}},     {"DownBlock 1", {64, 50, 50}}, {"DownBlock 2", {128, 25, 25}},
      {"DownBlock 3", {256, 12, 12}}, {"DownBlock 4", {512, 6, 6}}, {"Flatten", {18432}},
      {"Latent 1", {18432, 4096}},  {"K", {4096, 4096}},           {"Latent 2", {4096, 18432}},
      {"Reshape", {512, 6, 6}},     {"UpBlock 4", {256, 12, 12}},  {"UpBlock 3", {128, 25, 25}},
      {"UpBlock 2", {64, 50, 50}},  {"UpBlock 1", {4, 100, 100}},  {"Output", {1, 100, 100}},
  };
  const KoopmanAE model(AEConfig::paper(), 0);
  const auto rows = model.shape_trace();
  REQUIRE(rows.size() == expected.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CAPTURE(i);
    CHECK(rows[i].layer == expected[i].layer);
    CHECK(ad::shape_str(rows[i].shape) == ad::shape_str(expected[i].shape));
  }
  CHECK(model.koopman_matrix().shape() == Shape{4096, 4096});
  bool koopman_bias = false;
  for (const auto& p : model.parameters()) koopman_bias |= p.name == "koopman.bias";
  CHECK_FALSE(koopman_bias);
}
