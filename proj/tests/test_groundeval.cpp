#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "twist/groundeval.hpp"
#include "twist/rng.hpp"

#include "support/coco_oracle.hpp"

using namespace twist;

namespace {

using twist_oracle::oracle_coco_ap;

Detection det(std::string phrase, BBox box, float score, std::string cat, int image = 0) {
    Detection d;
    d.phrase = std::move(phrase);
    d.box = box;
    d.score = score;
    d.mapped_category = std::move(cat);
    d.image_id = image;
    return d;
}

} // namespace

TEST_CASE("parse extracts phrase and box from bracket text") {
    auto dets = parse_grounded_caption("a red circle at [12, 5, 40, 33] near the corner");
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].phrase == "red circle");
    CHECK(dets[0].box == BBox{12, 5, 40, 33});
}

TEST_CASE("parse on text without brackets is empty") {
    CHECK(parse_grounded_caption("no boxes anywhere here").empty());
}

TEST_CASE("malformed bracket groups are skipped and counted") {
    ParseDiagnostics diag;
    auto dets = parse_grounded_caption("bad [1, 2, 3] and good dog [4, 4, 9, 9]", &diag);
    REQUIRE(dets.size() == 1);
    CHECK(diag.malformed == 1);
    CHECK(dets[0].phrase == "good dog");

    parse_grounded_caption("degenerate [5, 5, 5, 9]", &diag);
    CHECK(diag.malformed == 1);
    parse_grounded_caption("words [a, b, c, d]", &diag);
    CHECK(diag.malformed == 1);
    parse_grounded_caption("unterminated [1, 2", &diag);
    CHECK(diag.malformed == 1);
}

TEST_CASE("parse accepts the literal token form and dequantizes") {
    ParseDiagnostics diag;
    auto dets = parse_grounded_caption("the blue square at <box> <x_3> <y_1> <x_10> <y_8> </box>", &diag);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].phrase == "blue square");
    CHECK(dets[0].box == BBox{12, 4, 44, 36});
    CHECK(diag.malformed == 0);

    parse_grounded_caption("<box> <x_3> </box>", &diag);
    CHECK(diag.malformed == 1);
}

TEST_CASE("phrase runs cross ':' but stop at sentence punctuation") {
    auto dets = parse_grounded_caption("locate the red circle: it is at [8, 8, 40, 40]");
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].phrase == "red circle");

    dets = parse_grounded_caption("something else. the green star at [8, 8, 40, 40]");
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].phrase == "green star");
}

TEST_CASE("parse/serialize identity") {
    Pcg32 rng(31, 2);
    std::vector<std::string> phrases = {"red circle", "blue square", "small star", "green triangle"};
    std::vector<Detection> dets;
    for (int i = 0; i < 6; ++i) {
        int x1 = static_cast<int>(rng.bounded(200));
        int y1 = static_cast<int>(rng.bounded(200));
        Detection d;
        d.phrase = phrases[rng.bounded(4)];
        d.box = {x1, y1, x1 + 10 + static_cast<int>(rng.bounded(40)), y1 + 10 + static_cast<int>(rng.bounded(40))};
        dets.push_back(d);
    }
    auto round = parse_grounded_caption(detections_to_text(dets));
    REQUIRE(round.size() == dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
        CHECK(round[i].phrase == dets[i].phrase);
        CHECK(round[i].box == dets[i].box);
    }
}

TEST_CASE("name to category mapping cascade") {
    std::vector<std::string> cats = {categories().begin(), categories().end()};
    CHECK(map_name_to_category("Circles", cats) == "circle");
    CHECK(map_name_to_category("SQUARE", cats) == "square");
    CHECK(map_name_to_category("large red circle", cats) == "circle"); // containment rescue
    CHECK(map_name_to_category("banana", cats) == std::nullopt);
    CHECK(map_name_to_category("", cats) == std::nullopt);
    CHECK_THROWS_AS(map_name_to_category("circle", {}), ArgError);

    SynonymTable syn;
    syn.add("disc", "circle");
    CHECK(map_name_to_category("disc", cats, &syn) == "circle");
    CHECK(map_name_to_category("discs", cats, &syn) == "circle"); // singularized before lookup
}

TEST_CASE("iou op examples") {
    CHECK(iou({3, 3, 9, 9}, {3, 3, 9, 9}) == 1.0);
    CHECK(iou({0, 0, 4, 4}, {8, 8, 12, 12}) == 0.0);
    CHECK_THAT(iou({0, 0, 2, 2}, {1, 1, 3, 3}), Catch::Matchers::WithinAbs(1.0 / 7.0, 1e-12));
}

TEST_CASE("coco_ap trivial cases") {
    std::vector<GroundTruthBox> gts = {{0, "circle", {10, 10, 60, 60}}};
    auto perfect = coco_ap({det("circle", {10, 10, 60, 60}, 0.9f, "circle")}, gts);
    CHECK_THAT(perfect.ap, Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK_THAT(perfect.ap50, Catch::Matchers::WithinAbs(1.0, 1e-12));

    auto none = coco_ap({}, gts);
    CHECK(none.ap == 0.0);
    CHECK(none.ap50 == 0.0);
    CHECK(none.ap_l == 0.0);
}

TEST_CASE("one TP and one lower-scored FP keep AP50 at 1.0") {
    std::vector<GroundTruthBox> gts = {{0, "circle", {10, 10, 60, 60}}};
    std::vector<Detection> dets = {det("circle", {10, 10, 60, 60}, 0.9f, "circle"),
                                   det("circle", {150, 150, 200, 200}, 0.8f, "circle")};
    auto r = coco_ap(dets, gts);
    CHECK_THAT(r.ap50, Catch::Matchers::WithinAbs(1.0, 1e-12));
    auto oracle = oracle_coco_ap(dets, gts);
    CHECK_THAT(r.ap50, Catch::Matchers::WithinAbs(oracle.ap50, 1e-12));
}

TEST_CASE("unmapped detections are excluded from matching") {
    std::vector<GroundTruthBox> gts = {{0, "circle", {10, 10, 60, 60}}};
    Detection unmapped;
    unmapped.box = {10, 10, 60, 60};
    unmapped.score = 0.99f;
    std::vector<Detection> dets = {unmapped, det("circle", {10, 10, 60, 60}, 0.5f, "circle")};
    auto r = coco_ap(dets, gts);
    CHECK_THAT(r.ap50, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("coco_ap equals the brute-force oracle on randomized instances") {
    Pcg32 rng(7, 3);
    std::vector<std::string> cats = {"circle", "square"};
    for (int inst = 0; inst < 300; ++inst) {
        int n_gt = 1 + static_cast<int>(rng.bounded(4));
        int n_det = static_cast<int>(rng.bounded(11));
        int n_img = 1 + static_cast<int>(rng.bounded(3));
        std::vector<GroundTruthBox> gts;
        for (int i = 0; i < n_gt; ++i) {
            int x = static_cast<int>(rng.bounded(5)) * 32;
            int y = static_cast<int>(rng.bounded(5)) * 32;
            int w = 32 + static_cast<int>(rng.bounded(3)) * 48;
            int h = 32 + static_cast<int>(rng.bounded(3)) * 48;
            gts.push_back({static_cast<int>(rng.bounded(static_cast<std::uint32_t>(n_img))),
                           cats[rng.bounded(2)], {x, y, std::min(256, x + w), std::min(256, y + h)}});
        }
        std::vector<Detection> dets;
        for (int i = 0; i < n_det; ++i) {
            int x = static_cast<int>(rng.bounded(5)) * 32;
            int y = static_cast<int>(rng.bounded(5)) * 32;
            int w = 32 + static_cast<int>(rng.bounded(3)) * 48;
            int h = 32 + static_cast<int>(rng.bounded(3)) * 48;
            // quantized scores force ties; insertion order must break them
            float score = static_cast<float>(rng.bounded(5)) / 4.0f;
            dets.push_back(det("", {x, y, std::min(256, x + w), std::min(256, y + h)}, score,
                               cats[rng.bounded(2)], static_cast<int>(rng.bounded(static_cast<std::uint32_t>(n_img)))));
        }
        auto got = coco_ap(dets, gts);
        auto want = oracle_coco_ap(dets, gts);
        CHECK_THAT(got.ap, Catch::Matchers::WithinAbs(want.ap, 1e-9));
        CHECK_THAT(got.ap50, Catch::Matchers::WithinAbs(want.ap50, 1e-9));
        CHECK_THAT(got.ap_l, Catch::Matchers::WithinAbs(want.ap_l, 1e-9));
    }
}

TEST_CASE("adding a true positive never decreases AP50; adding FPs never increases it") {
    Pcg32 rng(13, 4);
    for (int inst = 0; inst < 50; ++inst) {
        std::vector<GroundTruthBox> gts;
        int n_gt = 2 + static_cast<int>(rng.bounded(3));
        for (int i = 0; i < n_gt; ++i) {
            int x = static_cast<int>(rng.bounded(4)) * 48;
            gts.push_back({0, "circle", {x, x, x + 40, x + 40}});
        }
        std::vector<Detection> dets;
        for (int i = 0; i < 2; ++i)
            dets.push_back(det("", gts[static_cast<std::size_t>(i)].box, 0.5f + 0.1f * i, "circle"));
        double base = coco_ap(dets, gts).ap50;

        auto with_tp = dets;
        with_tp.push_back(det("", gts.back().box, 0.3f, "circle"));
        CHECK(coco_ap(with_tp, gts).ap50 >= base - 1e-12);

        auto with_fp = dets;
        with_fp.push_back(det("", {200, 200, 250, 250}, 0.95f, "circle"));
        with_fp.push_back(det("", {200, 0, 250, 40}, 0.05f, "circle"));
        CHECK(coco_ap(with_fp, gts).ap50 <= base + 1e-12);
    }
}

TEST_CASE("mean_iou_protocol basics and buckets") {
    std::vector<GroundTruthBox> gts = {{0, "circle", {0, 0, 40, 40}},     // medium
                                       {0, "square", {0, 0, 128, 128}}};  // large
    std::vector<std::optional<BBox>> perfect = {gts[0].box, gts[1].box};
    auto r = mean_iou_protocol(perfect, gts);
    CHECK(r.miou == 1.0);
    CHECK(r.miou_m == 1.0);
    CHECK(r.miou_l == 1.0);

    std::vector<std::optional<BBox>> missing = {std::nullopt, std::nullopt};
    auto z = mean_iou_protocol(missing, gts);
    CHECK(z.miou == 0.0);
    CHECK(z.miou_m == 0.0);
    CHECK(z.miou_l == 0.0);

    std::vector<std::optional<BBox>> mixed = {BBox{0, 0, 40, 40}, std::nullopt};
    auto m = mean_iou_protocol(mixed, gts);
    CHECK_THAT(m.miou, Catch::Matchers::WithinAbs(0.5, 1e-12));
    CHECK_THAT(m.miou_m, Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK_THAT(m.miou_l, Catch::Matchers::WithinAbs(0.0, 1e-12));

    CHECK_THROWS_AS(mean_iou_protocol({std::nullopt}, gts), ArgError);
}

TEST_CASE("rec accuracy counts IoU >= 0.5 inclusively") {
    std::vector<BBox> gts = {{0, 0, 2, 2}, {0, 0, 2, 2}, {0, 0, 2, 2}, {0, 0, 2, 2}};
    std::vector<std::optional<BBox>> preds = {
        BBox{0, 0, 2, 2},  // 1.0
        BBox{0, 0, 2, 1},  // exactly 0.5
        BBox{0, 0, 1, 1},  // 0.25
        BBox{0, 0, 2, 2},  // 1.0
    };
    CHECK_THAT(rec_accuracy(preds, gts), Catch::Matchers::WithinAbs(0.75, 1e-12));
    CHECK(rec_accuracy({BBox{0, 0, 2, 2}}, {BBox{0, 0, 2, 2}}) == 1.0);
    CHECK_THROWS_AS(rec_accuracy(preds, {BBox{0, 0, 2, 2}}), ArgError);
}

TEST_CASE("forget_check counts byte-identical outputs") {
    CHECK(forget_check({"a", "b"}, {"a", "b"}) == 1.0);
    CHECK(forget_check({"a", "b"}, {"x", "y"}) == 0.0);
    std::vector<std::string> before(100), after(100);
    for (int i = 0; i < 100; ++i) before[static_cast<std::size_t>(i)] = after[static_cast<std::size_t>(i)] = std::to_string(i);
    after[99] = "changed";
    CHECK_THAT(forget_check(before, after), Catch::Matchers::WithinAbs(0.99, 1e-12));
    CHECK_THROWS_AS(forget_check({"a"}, {"a", "b"}), ArgError);
}

TEST_CASE("eval report json uses the exact field names") {
    EvalReport r;
    r.ap50 = 0.5;
    auto j = r.to_json();
    for (const char* key : {"ap", "ap50", "ap_l", "miou", "miou_m", "miou_l", "rec_acc",
                            "iu_exact_match", "invalid_f1", "unmapped_fraction"})
        CHECK(j.contains(key));
    CHECK(j.size() == 10);
    EvalReport back = EvalReport::from_json(j);
    CHECK(back.ap50 == 0.5);
    CHECK_THROWS_AS(EvalReport::from_json(nlohmann::json{{"ap", 1.0}}), FormatError);
}

TEST_CASE("synonym table file format") {
    namespace fs = std::filesystem;
    std::string path = (fs::temp_directory_path() / "twist_syn_test.tsv").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "disc\tcircle\nbox shape\tsquare\n";
    }
    SynonymTable t = SynonymTable::load(path);
    CHECK(t.lookup("disc") == "circle");
    CHECK(t.lookup("box shape") == "square");
    CHECK(!t.lookup("nothing"));
    {
        std::ofstream out(path, std::ios::binary);
        out << "no-tab-here\n";
    }
    CHECK_THROWS_AS(SynonymTable::load(path), FormatError);
    std::remove(path.c_str());
}
