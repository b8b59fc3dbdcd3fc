#ifndef PC_OPTIMIZER_HPP
#define PC_OPTIMIZER_HPP

// Rule-based TCAP rewriting to fixpoint: redundant-apply elimination and
// filter pushdown past joins.

#include <functional>
#include <string>

#include "pc/tcap.hpp"

namespace pc::opt {

class OptimizerDivergence : public PcError {
public:
    explicit OptimizerDivergence(const std::string& msg = "rule firing cap exceeded")
        : PcError(msg) {}
};

// The origin of a column's data: either a source list or the statement that
// computed it.  Columns with equal roots carry the same data object.
struct LineageRoot {
    std::string origin;
    std::string column;

    bool operator==(const LineageRoot&) const = default;
};

// Trace column `col` of vector list `list` back through copy lists.
LineageRoot trace_column(const tcap::Program& p, const std::string& list, const std::string& col);

struct RewriteResult {
    tcap::Program program;
    bool changed = false;
};

// Remove one redundant APPLY (methodCall with the same methodName, or
// attAccess with the same attName, ancestor/descendant, identical argument
// lineage), widening intervening copy lists to carry the surviving column.
RewriteResult eliminate_redundant_apply(const tcap::Program& p);

// Push one single-side conjunct of a post-join bool_and predicate down to
// the corresponding join input, re-emitting it as an APPLY chain + FILTER
// before that input's HASH.
RewriteResult push_filter_past_join(const tcap::Program& p);

using TraceFn = std::function<void(const std::string& ruleName, const tcap::Program& after)>;

// Round-robin both rules to fixpoint; throws OptimizerDivergence after
// 10,000 firings.
tcap::Program optimize(const tcap::Program& p, const TraceFn& trace = {});

// Canonical renaming for golden comparisons: statement outputs become L1..Ln,
// columns c1..cm by first appearance, computations comp1.., stages s1..;
// source names are kept verbatim.
tcap::Program canonicalize(const tcap::Program& p);

}  // namespace pc::opt

#endif
