#include <algorithm>

#include "doctest.h"
#include "trunet/error.hpp"
#include "trunet/gradcheck_suite.hpp"

using namespace trunet;

TEST_CASE("every registered primitive and block passes") {
  const auto rows = run_gradcheck_suite();
  CHECK(rows.size() == gradcheck_names().size());
  for (const auto& r : rows) {
    INFO(r.name << " max_rel_err=" << r.report.max_rel_err);
    CHECK(r.report.pass);
    CHECK(r.report.max_rel_err <= 1e-4);
    CHECK(r.report.checked > 0);
  }
  const auto names = gradcheck_names();
  for (const char* required : {"conv3d", "bottleneck", "vit_layer", "decoder_stage", "dice_ce_loss"}) {
    CHECK(std::find(names.begin(), names.end(), required) != names.end());
  }
}

TEST_CASE("restricting to one op") {
  const auto one = run_gradcheck_suite("conv3d");
  REQUIRE(one.size() == 1);
  CHECK(one[0].name == "conv3d");
  CHECK(one[0].kind == "primitive");
  // same stream as in the full run
  const auto all = run_gradcheck_suite();
  CHECK(all[0].report.max_rel_err == one[0].report.max_rel_err);
  CHECK_THROWS_AS(run_gradcheck_suite("conv4d"), UsageError);
}
