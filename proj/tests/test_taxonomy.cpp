#include <gtest/gtest.h>

#include <functional>
#include <sstream>

#include "oracles.hpp"
#include "support.hpp"

using namespace taxengine;

using namespace testing_support;

TEST(ParsePath, SplitsAndTrims)
{
    const auto p = parse_path("A > B > C", ">");
    EXPECT_EQ(p.segments, (std::vector<std::string>{"A", "B", "C"}));
}

TEST(ParsePath, KimonoExample)
{
    const auto p = parse_path("Apparel & Accessories > Clothing > Traditional & Ceremonial Clothing > Kimonos > Bridal Kimonos", ">");
    ASSERT_EQ(p.depth(), 5u);
    EXPECT_EQ(p.segments.back(), "Bridal Kimonos");
    EXPECT_EQ(p.segments.front(), "Apparel & Accessories");
}

TEST(ParsePath, Errors)
{
    EXPECT_EQ(code_of([] { parse_path("A >  > C", ">"); }), Errc::EmptySegment);
    EXPECT_EQ(code_of([] { parse_path("   ", ">"); }), Errc::EmptyPath);
    EXPECT_EQ(code_of([] { parse_path("A > ", ">"); }), Errc::EmptySegment);
}

TEST(ParsePath, CanonicalJoinRoundTrip)
{
    for (const auto* raw : {"A", "A > B", "Apparel & Accessories > Shoes > Open Shoes"}) {
        EXPECT_EQ(parse_path(raw).join(), raw);
    }
}

TEST(Build, TwoChildren)
{
    const auto t = tree_of({"A > B", "A > C"});
    EXPECT_EQ(t.max_depth(), 2u);
    ASSERT_EQ(t.roots().size(), 1u);
    const auto& root = t.node(t.roots().front());
    EXPECT_EQ(root.name, "A");
    ASSERT_EQ(root.children.size(), 2u);
    EXPECT_EQ(t.node(root.children[0]).name, "B");
    EXPECT_EQ(t.node(root.children[1]).name, "C");
}

TEST(Build, ChainHasStopPerLevel)
{
    const auto t = tree_of({"A > B > C"});
    EXPECT_EQ(t.max_depth(), 3u);
    EXPECT_EQ(t.class_count(1), 1u);
    for (std::size_t level = 2; level <= 3; ++level) {
        EXPECT_EQ(t.level_nodes(level).size(), 1u);
        EXPECT_EQ(t.class_count(level), 2u);
        EXPECT_EQ(t.stop_index(level), 1u);
    }
}

TEST(Build, RecordedInteriorTerminal)
{
    const auto t = tree_of({"A > B", "A > B > C"});
    const auto b = id_of(t, "A > B");
    EXPECT_TRUE(t.node(b).terminal);
    const auto mask = t.children_mask(b);
    EXPECT_EQ(mask.bits[t.node(id_of(t, "A > B > C")).position], 1);
    EXPECT_EQ(mask.bits[t.stop_index(3)], 1);
}

TEST(Build, BfsLexicographicIds)
{
    const auto t = tree_of({"R > z > q", "R > a", "R > m > b", "R > m > a"});
    std::vector<std::string> names;
    for (std::uint32_t i = 0; i < t.size(); ++i) {
        names.push_back(t.node(NodeId{i}).name);
    }
    EXPECT_EQ(names, (std::vector<std::string>{"R", "a", "m", "z", "a", "b", "q"}));
}

TEST(Build, GlobalNameCollisionsAllowed)
{
    const auto t = tree_of({"R > Men > Accessories", "R > Women > Accessories"});
    EXPECT_NE(id_of(t, "R > Men > Accessories"), id_of(t, "R > Women > Accessories"));
}

TEST(ChildrenMask, ForestExample)
{
    // level-2 order [B, C, E, STOP]
    const auto t = tree_of({"A > B", "A > C", "D > E"});
    const auto a = id_of(t, "A");
    const auto d = id_of(t, "D");
    EXPECT_EQ(t.children_mask(a).bits, (std::vector<std::uint8_t>{1, 1, 0, 0}));
    EXPECT_EQ(t.children_mask(d).bits, (std::vector<std::uint8_t>{0, 0, 1, 0}));
}

TEST(ChildrenMask, TerminalLeafParentOnlyStop)
{
    const auto t = tree_of({"A > B > C", "A > D"});
    const auto d = id_of(t, "A > D");
    const auto m = t.children_mask(d);
    EXPECT_EQ(m.popcount(), 1u);
    EXPECT_EQ(m.bits.back(), 1);
}

TEST(ChildrenMask, UnknownNode)
{
    const auto t = tree_of({"A > B"});
    EXPECT_EQ(code_of([&] { t.children_mask(NodeId{99}); }), Errc::UnknownNode);
}

TEST(AncestorClosure, Examples)
{
    const auto chain = tree_of({"A > B > C"});
    const auto c = chain.ancestor_closure(id_of(chain, "A > B > C"));
    EXPECT_EQ(c, (std::vector<NodeId>{id_of(chain, "A"), id_of(chain, "A > B"), id_of(chain, "A > B > C")}));
    EXPECT_EQ(chain.ancestor_closure(id_of(chain, "A")), (std::vector<NodeId>{id_of(chain, "A")}));
    const auto t = tree_of({"A > B", "A > C"});
    EXPECT_EQ(t.ancestor_closure(id_of(t, "A > B")), (std::vector<NodeId>{id_of(t, "A"), id_of(t, "A > B")}));
    EXPECT_EQ(code_of([&] { t.ancestor_closure(NodeId{50}); }), Errc::UnknownNode);
}

TEST(ValidatePath, Examples)
{
    const auto chain = tree_of({"A > B > C"});
    EXPECT_TRUE(chain.validate_path(parse_path("A > B > C")));
    EXPECT_FALSE(chain.validate_path(parse_path("A > C")));
    EXPECT_FALSE(chain.validate_path(parse_path("A > B")));
    EXPECT_FALSE(chain.validate_path(parse_path("A > B > Z")));
    const auto t = tree_of({"A > B", "A > B > C"});
    EXPECT_TRUE(t.validate_path(parse_path("A > B")));
}

TEST(Graft, ShoesGainsThreeChildren)
{
    const auto t = tree_of({"Apparel > Shoes", "Apparel > Bags > Totes"});
    const auto shoes = id_of(t, "Apparel > Shoes");
    const std::vector<CategoryPath> rel{parse_path("Sneakers"), parse_path("Boots"), parse_path("Open Shoes")};
    const auto g = t.graft(shoes, rel);
    EXPECT_EQ(g.node(shoes).children.size(), 3u);
    EXPECT_TRUE(g.validate_path(parse_path("Apparel > Shoes > Open Shoes")));
    EXPECT_TRUE(t.node(shoes).children.empty());
    EXPECT_EQ(t.size() + 3, g.size());
}

TEST(Graft, EmptyIsIdentity)
{
    const auto t = tree_of({"A > B", "A > C > D"});
    const auto g = t.graft(id_of(t, "A > B"), std::vector<CategoryPath>{});
    EXPECT_EQ(g.to_lines(), t.to_lines());
    EXPECT_EQ(g.hash(), t.hash());
}

TEST(Graft, Errors)
{
    const auto t = tree_of({"A > B > C"});
    const std::vector<CategoryPath> dup{parse_path("C")};
    EXPECT_EQ(code_of([&] { t.graft(id_of(t, "A > B"), dup); }), Errc::DuplicateChild);
    const std::vector<CategoryPath> deep{parse_path("x > y > z")};
    EXPECT_EQ(code_of([&] { t.graft(id_of(t, "A > B"), deep, 4); }), Errc::DepthExceeded);
}

TEST(TaxonomyFile, CommentsBlanksAndRoundTrip)
{
    std::istringstream in("# header\n\nA > B\n  A > C > D  \n# trailing\n");
    const auto t = Taxonomy::from_lines(in);
    EXPECT_EQ(t.size(), 4u);
    std::ostringstream os;
    for (const auto& l : t.to_lines()) {
        os << l << '\n';
    }
    std::istringstream again(os.str());
    const auto u = Taxonomy::from_lines(again);
    EXPECT_EQ(u.hash(), t.hash());
    for (std::size_t level = 1; level <= t.max_depth(); ++level) {
        ASSERT_EQ(u.level_nodes(level).size(), t.level_nodes(level).size());
        for (std::size_t i = 0; i < t.level_nodes(level).size(); ++i) {
            EXPECT_EQ(u.path_of(u.level_nodes(level)[i]), t.path_of(t.level_nodes(level)[i]));
        }
    }
}

TEST(TaxonomyProperties, RandomTrees)
{
    CounterRng rng(7, 1);
    for (int trial = 0; trial < 40; ++trial) {
        const auto paths = oracle::random_tree_paths(rng, 2 + rng.below(4), 4);
        const auto t = Taxonomy::build(paths);
        // mask bits mirror parent links exactly
        for (std::uint32_t id = 0; id < t.size(); ++id) {
            const NodeId p{id};
            const auto& n = t.node(p);
            EXPECT_EQ(t.ancestor_closure(p).size(), n.level);
            if (n.level >= t.max_depth()) {
                continue;
            }
            const auto mask = t.children_mask(p);
            const auto kids = t.level_nodes(n.level + 1);
            ASSERT_EQ(mask.bits.size(), kids.size() + 1);
            EXPECT_GE(mask.popcount(), 1u);
            for (std::size_t i = 0; i < kids.size(); ++i) {
                EXPECT_EQ(mask.bits[i] == 1, t.node(kids[i]).parent == p);
            }
            EXPECT_EQ(mask.bits.back() == 1, n.terminal || n.children.empty());
        }
        for (const auto& p : paths) {
            EXPECT_TRUE(t.validate_path(p)) << p.join();
        }
        // graft is append-only
        const auto anchor = t.level_nodes(1 + rng.below(t.max_depth()))[0];
        const std::vector<CategoryPath> rel{CategoryPath{{"new_a"}}, CategoryPath{{"new_b", "deeper"}}};
        const auto g = t.graft(anchor, rel);
        for (std::uint32_t id = 0; id < t.size(); ++id) {
            EXPECT_EQ(g.node(NodeId{id}).position, t.node(NodeId{id}).position);
            EXPECT_EQ(g.path_of(NodeId{id}), t.path_of(NodeId{id}));
        }
        for (std::size_t level = 2; level <= t.max_depth(); ++level) {
            EXPECT_EQ(g.stop_index(level), g.level_nodes(level).size());
        }
        EXPECT_TRUE(g.validate_path(([&] {
            auto p = t.path_of(anchor);
            p.segments.push_back("new_a");
            return p;
        })()));
    }
}
