//! Monte Carlo tree search with PRM-scored expansions and max-rule backprop.

use super::{MctsConfig, SearchError, SearchNode, SearchResult};
use crate::aggregate::aggregate;
use crate::backends::{BackendError, GenParams, GeneratorContract, ScorerContract};
use crate::domain::{parse_final_answer, ChainOfThought, GenMeta, Question, Step};

/// UCT child selection. `children` is `(q_value, visits)` per child, in child
/// order. Unvisited children have infinite priority (first such index wins);
/// otherwise picks argmax of `q + w * sqrt(ln(parent_visits) / visits)`,
/// breaking ties toward the lower index.
pub fn uct_select(
    parent_visits: u64,
    children: &[(f64, u64)],
    w: f64,
) -> Result<usize, SearchError> {
    if children.is_empty() {
        return Err(SearchError::NoChildren);
    }
    if let Some(idx) = children.iter().position(|&(_, visits)| visits == 0) {
        return Ok(idx);
    }
    let ln_parent = (parent_visits.max(1) as f64).ln();
    let mut best = 0usize;
    let mut best_priority = f64::NEG_INFINITY;
    for (idx, &(q, visits)) in children.iter().enumerate() {
        let priority = q + w * (ln_parent / visits as f64).sqrt();
        if priority > best_priority {
            best_priority = priority;
            best = idx;
        }
    }
    Ok(best)
}

struct Node {
    step: Option<Step>,
    parent: Option<usize>,
    children: Vec<usize>,
    q: f64,
    visits: u64,
    terminal: bool,
    /// Dead ends (no continuations, no answer) are sealed off from selection
    /// but never compete as answers.
    dead: bool,
    depth: usize,
}

fn prefix_of(nodes: &[Node], mut idx: usize) -> Vec<Step> {
    let mut steps = Vec::with_capacity(nodes[idx].depth);
    while let Some(parent) = nodes[idx].parent {
        steps.push(nodes[idx].step.clone().expect("non-root has a step"));
        idx = parent;
    }
    steps.reverse();
    steps
}

fn snapshot(nodes: &[Node], idx: usize, prefix: &[Step]) -> SearchNode {
    let node = &nodes[idx];
    let mut own = prefix.to_vec();
    if let Some(step) = &node.step {
        own.push(step.clone());
    }
    let children = node
        .children
        .iter()
        .map(|&c| snapshot(nodes, c, &own))
        .collect();
    SearchNode {
        prefix: own,
        q_value: node.q,
        visits: node.visits,
        children,
        terminal: node.terminal,
    }
}

/// Runs `cfg.rollouts` MCTS rollouts. Each rollout selects down the tree by
/// UCT (incrementing visit counts on the way), then repeatedly expands the
/// reached leaf with `cfg.branch` scored children and descends to the
/// highest-scoring child until an answer is parsed or `cfg.max_steps` is hit.
/// Q values propagate back up the rollout path by the max rule. Returns the
/// highest-Q terminal found across all rollouts.
pub fn mcts(
    gen: &dyn GeneratorContract,
    scorer: &dyn ScorerContract,
    question: &Question,
    cfg: &MctsConfig,
) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let params = GenParams::default();

    let mut nodes = vec![Node {
        step: None,
        parent: None,
        children: Vec::new(),
        q: 0.0,
        visits: 0,
        terminal: false,
        dead: false,
        depth: 0,
    }];
    let mut terminals: Vec<usize> = Vec::new();
    let mut units: u64 = 0;

    for rollout in 1..=cfg.rollouts {
        let fail = |source: BackendError| SearchError::BackendFailure {
            round: rollout,
            source,
        };
        let mut path = vec![0usize];
        let mut cur = 0usize;

        // Selection: walk by UCT until a leaf (no children, or terminal).
        while !nodes[cur].terminal && !nodes[cur].children.is_empty() {
            nodes[cur].visits += 1;
            let stats: Vec<(f64, u64)> = nodes[cur]
                .children
                .iter()
                .map(|&c| (nodes[c].q, nodes[c].visits))
                .collect();
            let pick = uct_select(nodes[cur].visits, &stats, cfg.explore_weight)?;
            cur = nodes[cur].children[pick];
            path.push(cur);
        }

        // Expansion and simulation: grow scored children, descend greedily.
        while !nodes[cur].terminal && nodes[cur].depth < cfg.max_steps {
            nodes[cur].visits += 1;
            let prefix = prefix_of(&nodes, cur);
            let steps = gen
                .next_steps(question, &prefix, cfg.branch, &params)
                .map_err(fail)?;
            units += steps.len() as u64;
            if steps.is_empty() {
                nodes[cur].terminal = true;
                nodes[cur].dead = true;
                break;
            }
            let depth = nodes[cur].depth + 1;
            let mut best_child: Option<(f64, usize)> = None;
            for step in steps {
                let mut child_prefix = prefix.clone();
                child_prefix.push(step.clone());
                let rv = scorer.score(question, &child_prefix).map_err(fail)?;
                let q = aggregate(&rv, cfg.method)?;
                let terminal =
                    parse_final_answer(step.text()).is_some() || depth >= cfg.max_steps;
                let id = nodes.len();
                nodes.push(Node {
                    step: Some(step),
                    parent: Some(cur),
                    children: Vec::new(),
                    q,
                    visits: 0,
                    terminal,
                    dead: false,
                    depth,
                });
                nodes[cur].children.push(id);
                if terminal {
                    terminals.push(id);
                }
                if best_child.is_none_or(|(bq, _)| q > bq) {
                    best_child = Some((q, id));
                }
            }
            let (_, next) = best_child.expect("children were pushed");
            cur = next;
            path.push(cur);
        }

        // Backpropagation: max rule along the rollout path.
        let q_final = nodes[cur].q;
        for &n in &path {
            if nodes[n].q < q_final {
                nodes[n].q = q_final;
            }
        }
    }

    let best = terminals
        .iter()
        .copied()
        .reduce(|acc, t| if nodes[t].q > nodes[acc].q { t } else { acc })
        .ok_or(SearchError::NoTerminalFound)?;

    let gen_meta = GenMeta {
        model_id: "mcts".to_owned(),
        temperature: params.temperature,
        seed: None,
    };
    let tree = snapshot(&nodes, 0, &[]);
    let trace = tree.trace();
    Ok(SearchResult {
        cot: ChainOfThought::new(question.id(), prefix_of(&nodes, best), gen_meta)?,
        score: nodes[best].q,
        generation_units: units,
        trace,
        tree: Some(tree),
    })
}
