#include "doctest.h"

#include <set>

#include "crashsev/common.hpp"
#include "crashsev/schema.hpp"
#include "crashsev/synthgen.hpp"
#include "test_util.hpp"

using namespace crashsev;

namespace {

Schema small_schema() {
    return Schema{{{"Prsn_Age", ColumnKind::Numeric, ColumnRole::Feature},
                   {"Wthr_Cond_ID", ColumnKind::Categorical, ColumnRole::Feature},
                   {"Prsn_Injry_Sev_ID", ColumnKind::Categorical, ColumnRole::Target}}};
}

}  // namespace

TEST_CASE("parse a three-row csv") {
    testutil::TempDir dir("schema");
    const auto p = dir.write("a.csv", "Prsn_Age,Wthr_Cond_ID,Prsn_Injry_Sev_ID\n34,clear,O\n51,rain,B\n19,\"fog, light\",K\n");
    const CrashTable t = parse_crash_csv(p, small_schema());
    CHECK(t.n_rows == 3);
    CHECK(t.at("Prsn_Age").numbers[1] == 51.0);
    CHECK(t.at("Wthr_Cond_ID").tokens[2] == "fog, light");
    CHECK(t.at("Prsn_Injry_Sev_ID").tokens[0] == "O");
    CHECK(severity_labels(t, small_schema()) == std::vector<int>{2, 1, 0});
}

TEST_CASE("unparseable numeric cell is flagged missing, row kept") {
    testutil::TempDir dir("schema");
    const auto p = dir.write("a.csv", "Prsn_Age,Wthr_Cond_ID,Prsn_Injry_Sev_ID\nabc,clear,O\n40,,A\n");
    const CrashTable t = parse_crash_csv(p, small_schema());
    CHECK(t.n_rows == 2);
    CHECK(t.at("Prsn_Age").is_missing(0));
    CHECK_FALSE(t.at("Prsn_Age").is_missing(1));
    // empty categorical cell is missing; the literal "Unknown" would not be
    CHECK(t.at("Wthr_Cond_ID").is_missing(1));
}

TEST_CASE("Unknown is a category, not a missing cell") {
    testutil::TempDir dir("schema");
    const auto p = dir.write("a.csv", "Prsn_Age,Wthr_Cond_ID,Prsn_Injry_Sev_ID\n3,Unknown,O\n");
    const CrashTable t = parse_crash_csv(p, small_schema());
    CHECK_FALSE(t.at("Wthr_Cond_ID").is_missing(0));
    CHECK(t.at("Wthr_Cond_ID").tokens[0] == "Unknown");
}

TEST_CASE("duplicate header is an error") {
    testutil::TempDir dir("schema");
    const auto p = dir.write("a.csv", "Prsn_Age,Prsn_Age,Wthr_Cond_ID,Prsn_Injry_Sev_ID\n1,2,clear,O\n");
    try {
        parse_crash_csv(p, small_schema());
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Data);
        CHECK(std::string(e.what()).find("duplicate") != std::string::npos);
    }
}

TEST_CASE("missing file and header mismatch") {
    testutil::TempDir dir("schema");
    CHECK_THROWS_AS(parse_crash_csv(dir / "nope.csv", small_schema()), Error);
    const auto p = dir.write("a.csv", "Prsn_Age,Prsn_Injry_Sev_ID\n1,O\n");
    CHECK_THROWS_AS(parse_crash_csv(p, small_schema()), Error);
    const auto q = dir.write("b.csv", "Prsn_Age,Wthr_Cond_ID,Prsn_Injry_Sev_ID\n1,clear\n");
    CHECK_THROWS_AS(parse_crash_csv(q, small_schema()), Error);
}

TEST_CASE("map_kabco") {
    CHECK(map_kabco("K") == Severity::KA);
    CHECK(map_kabco("A") == Severity::KA);
    CHECK(map_kabco("B") == Severity::BC);
    CHECK(map_kabco("C") == Severity::BC);
    CHECK(map_kabco("O") == Severity::O);
    try {
        map_kabco("X");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Data);
    }
}

TEST_CASE("map_kabco is total and surjective") {
    std::set<int> image;
    for (const char* c : {"K", "A", "B", "C", "O"}) image.insert(static_cast<int>(map_kabco(c)));
    CHECK(image == std::set<int>{0, 1, 2});
}

TEST_CASE("parse, write, parse round-trips including missing flags") {
    testutil::TempDir dir("schema");
    GenConfig g;
    g.n_rows = 300;
    g.missing_rate = 0.2;
    g.non_ev_rows = 20;
    g.seed = 5;
    const CrashTable original = generate_ev_crashes(g).table;
    write_crash_csv(original, dir / "a.csv");
    const CrashTable once = parse_crash_csv(dir / "a.csv", reference_schema());
    write_crash_csv(once, dir / "b.csv");
    const CrashTable twice = parse_crash_csv(dir / "b.csv", reference_schema());
    CHECK(once == twice);
    CHECK(once == original);
    CHECK(read_text_file(dir / "a.csv") == read_text_file(dir / "b.csv"));
    std::size_t missing = 0;
    for (const auto& c : once.columns)
        for (auto m : c.missing) missing += m;
    CHECK(missing > 0);
}

TEST_CASE("csv quoting round-trips awkward fields") {
    for (std::string f : {"plain", "a,b", "say \"hi\"", "line\nbreak", ""}) {
        const std::string rec = quote_csv_field(f) + "," + quote_csv_field("x");
        const auto parts = split_csv_record(rec);
        REQUIRE(parts.size() == 2);
        CHECK(parts[0] == f);
    }
}

TEST_CASE("ingest keeps only rows with a true filter flag") {
    testutil::TempDir dir("schema");
    GenConfig g;
    g.n_rows = 200;
    g.non_ev_rows = 50;
    g.seed = 3;
    write_crash_csv(generate_ev_crashes(g).table, dir / "a.csv");
    const CrashTable t = ingest(dir / "a.csv", reference_schema());
    CHECK(t.n_rows == 200);
    for (std::size_t r = 0; r < t.n_rows; ++r) CHECK(parse_flag_token(t.at("IsElectric").tokens[r]));
}

TEST_CASE("schema file round-trip and validation") {
    testutil::TempDir dir("schema");
    save_schema(reference_schema(), dir / "s.txt");
    const Schema s = load_schema(dir / "s.txt");
    REQUIRE(s.columns.size() == reference_schema().columns.size());
    CHECK(s.target().name == "Prsn_Injry_Sev_ID");
    dir.write("bad.txt", "a numeric feature\na categorical target\n");
    CHECK_THROWS_AS(load_schema(dir / "bad.txt"), Error);
    dir.write("notarget.txt", "a numeric feature\n");
    CHECK_THROWS_AS(load_schema(dir / "notarget.txt").target(), Error);
}

TEST_CASE("missing severity is a data error") {
    testutil::TempDir dir("schema");
    const auto p = dir.write("a.csv", "Prsn_Age,Wthr_Cond_ID,Prsn_Injry_Sev_ID\n1,clear,\n");
    const CrashTable t = parse_crash_csv(p, small_schema());
    CHECK_THROWS_AS(severity_labels(t, small_schema()), Error);
}
