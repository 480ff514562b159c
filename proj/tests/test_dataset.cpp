#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <string>

#include "cdsens/dataset.hpp"

using namespace cdsens;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    std::string path = std::string("/tmp/cdsens_test_") + name;
    std::ofstream out(path);
    out << content;
    return path;
}

RoleMap basic_roles() {
    RoleMap rm;
    rm.y = "Y";
    rm.m = "M";
    rm.r = "R";
    return rm;
}

} // namespace

TEST_CASE("load_dataset parses a minimal file") {
    auto path = write_temp("basic.csv", "Y,M,R\n1.5,1,1\n2.0,0,1\n-0.5,1,0\n0.25,0,0\n");
    Dataset ds = load_dataset(path, basic_roles());
    REQUIRE(ds.n == 4);
    CHECK(ds.y[0] == 1.5);
    CHECK(ds.m[1] == 0);
    CHECK(ds.r[2] == 0);
    CHECK(ds.px() == 0);
    CHECK(ds.pc() == 0);
}

TEST_CASE("load_dataset rejects missing data") {
    auto path = write_temp("missing.csv", "Y,M,R\n1.5,1,1\n,0,0\n");
    CHECK_THROWS_WITH(load_dataset(path, basic_roles()),
                      Catch::Matchers::ContainsSubstring("missing value"));
}

TEST_CASE("load_dataset rejects a single-group file") {
    auto path = write_temp("onegroup.csv", "Y,M,R\n1,1,1\n2,0,1\n");
    CHECK_THROWS_WITH(load_dataset(path, basic_roles()),
                      Catch::Matchers::ContainsSubstring("empty group"));
}

TEST_CASE("load_dataset rejects non-binary M and non-numeric cells") {
    auto p1 = write_temp("badm.csv", "Y,M,R\n1,2,1\n2,0,0\n");
    CHECK_THROWS_WITH(load_dataset(p1, basic_roles()),
                      Catch::Matchers::ContainsSubstring("outside {0,1}"));
    auto p2 = write_temp("badcell.csv", "Y,M,R\n1,1,1\nfoo,0,0\n");
    CHECK_THROWS_WITH(load_dataset(p2, basic_roles()),
                      Catch::Matchers::ContainsSubstring("non-numeric"));
}

TEST_CASE("load_dataset reports missing headers and resolves H1 columns") {
    auto path = write_temp("roles.csv", "Y,M,R,x1,c1\n1,1,1,0.5,1\n2,0,0,-0.5,0\n");
    RoleMap rm = basic_roles();
    rm.x = {"x1"};
    rm.c = {"c1"};
    rm.h1 = {"x1", "c1"};
    Dataset ds = load_dataset(path, rm);
    REQUIRE(ds.h1_cols == std::vector<int>{0, 1});
    CHECK(ds.xc(0, 0) == 0.5);
    CHECK(ds.xc(0, 1) == 1.0);

    rm.x = {"nope"};
    CHECK_THROWS_WITH(load_dataset(path, rm),
                      Catch::Matchers::ContainsSubstring("missing header"));
}

TEST_CASE("center_covariates at the mean") {
    auto path = write_temp("center.csv",
                           "Y,M,R,c1\n1,1,1,0\n2,0,1,1\n3,1,0,1\n4,0,0,0\n");
    RoleMap rm = basic_roles();
    rm.c = {"c1"};
    Dataset ds = load_dataset(path, rm);
    CenterResult cr = center_covariates(ds);
    CHECK_THAT(cr.ds.c(0, 0), Catch::Matchers::WithinAbs(-0.5, 1e-14));
    CHECK_THAT(cr.ds.c(1, 0), Catch::Matchers::WithinAbs(0.5, 1e-14));
    CHECK_THAT(cr.centers[0], Catch::Matchers::WithinAbs(0.5, 1e-14));
    CHECK(std::fabs(cr.ds.c.col(0).mean()) < 1e-12);
}

TEST_CASE("center_covariates with explicit centers") {
    auto path = write_temp("center2.csv", "Y,M,R,c1\n1,1,1,2\n2,0,0,4\n");
    RoleMap rm = basic_roles();
    rm.c = {"c1"};
    Dataset ds = load_dataset(path, rm);

    VectorXd zero = VectorXd::Zero(1);
    CenterResult identity = center_covariates(ds, zero);
    CHECK(identity.ds.c(0, 0) == 2.0);
    CHECK(identity.ds.c(1, 0) == 4.0);

    VectorXd wrong(2);
    wrong << 0, 0;
    CHECK_THROWS_WITH(center_covariates(ds, wrong),
                      Catch::Matchers::ContainsSubstring("length"));
}

TEST_CASE("load -> save -> load round trip is bit-identical") {
    auto path = write_temp("round.csv",
                           "Y,M,R,x1,x2,c1\n"
                           "1.2345678901234567,1,1,0.1,2.5,1\n"
                           "-3.75,0,0,1e-8,0.3333333333333333,0\n"
                           "0.5,1,0,-2,7,1\n");
    RoleMap rm = basic_roles();
    rm.x = {"x1", "x2"};
    rm.c = {"c1"};
    Dataset a = load_dataset(path, rm);
    std::string saved = "/tmp/cdsens_test_round_out.csv";
    save_dataset(a, saved);
    Dataset b = load_dataset(saved, rm);
    REQUIRE(b.n == a.n);
    for (int i = 0; i < a.n; ++i) {
        CHECK(a.y[i] == b.y[i]);
        CHECK(a.m[i] == b.m[i]);
        CHECK(a.r[i] == b.r[i]);
        for (int j = 0; j < a.px(); ++j) CHECK(a.x(i, j) == b.x(i, j));
        for (int j = 0; j < a.pc(); ++j) CHECK(a.c(i, j) == b.c(i, j));
    }
}

TEST_CASE("with_extra_x appends a confounder column and remaps indices") {
    auto path = write_temp("extra.csv", "Y,M,R,x1,c1\n1,1,1,0.5,1\n2,0,0,-0.5,0\n");
    RoleMap rm = basic_roles();
    rm.x = {"x1"};
    rm.c = {"c1"};
    rm.h1 = {"c1"};
    Dataset ds = load_dataset(path, rm);
    REQUIRE(ds.h1_cols == std::vector<int>{1});

    VectorXd u(2);
    u << 9.0, -9.0;
    Dataset aug = ds.with_extra_x(u, "U", true);
    CHECK(aug.px() == 2);
    CHECK(aug.x(0, 1) == 9.0);
    // c1 shifted to index 2, and U (index 1) was added to h1
    CHECK(aug.h1_cols == std::vector<int>{2, 1});
    CHECK(aug.xc(1, 2) == 0.0);
}
