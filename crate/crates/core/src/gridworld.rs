//! Deterministic grid environments, state indexing and shortest paths.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major cell index, `row * width + col`.
pub type StateId = usize;
pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Left = 0,
    Up = 1,
    Right = 2,
    Down = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Left, Action::Up, Action::Right, Action::Down];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Action> {
        Action::ALL.get(code).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Left => (0, -1),
            Action::Up => (-1, 0),
            Action::Right => (0, 1),
            Action::Down => (1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: StateId,
    pub reward: f64,
    pub done: bool,
}

/// Shortest-path length, or a sentinel when no path exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Distance {
    Steps(usize),
    Unreachable,
}

impl Distance {
    pub fn steps(self) -> Option<usize> {
        match self {
            Distance::Steps(d) => Some(d),
            Distance::Unreachable => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal_cells: BTreeSet<Cell>,
    pub lava_cells: BTreeSet<Cell>,
    pub obstacle_cells: BTreeSet<Cell>,
}

fn cells(list: &[Cell]) -> BTreeSet<Cell> {
    list.iter().copied().collect()
}

impl GridSpec {
    /// Default 7x7 layout. The start sits mid-grid; one goal is in the
    /// top-right corner and a second at the bottom, both 24 steps away.
    pub fn gridworld7() -> GridSpec {
        GridSpec {
            width: 7,
            height: 7,
            start: (4, 2),
            goal_cells: cells(&[(0, 6), (6, 4)]),
            lava_cells: cells(&[(3, 3), (5, 1), (5, 4)]),
            obstacle_cells: cells(&[
                (0, 1),
                (0, 5),
                (1, 3),
                (1, 5),
                (2, 1),
                (2, 3),
                (2, 5),
                (3, 2),
                (3, 5),
                (4, 1),
                (4, 3),
                (5, 3),
                (5, 5),
                (6, 3),
            ]),
        }
    }

    /// Four rooms joined by single-cell doorways at (2,5), (9,5), (5,1), (6,8).
    pub fn fourroom11() -> GridSpec {
        let mut walls = Vec::new();
        for r in [0, 1, 3, 4, 5, 6, 7, 8, 10] {
            walls.push((r, 5));
        }
        for c in [0, 2, 3, 4] {
            walls.push((5, c));
        }
        for c in [6, 7, 9, 10] {
            walls.push((6, c));
        }
        GridSpec {
            width: 11,
            height: 11,
            start: (10, 0),
            goal_cells: cells(&[(0, 10)]),
            lava_cells: cells(&[(1, 2), (3, 8), (7, 2), (8, 8)]),
            obstacle_cells: cells(&walls),
        }
    }

    pub fn builtin(name: &str) -> Option<GridSpec> {
        match name {
            "gridworld7" => Some(GridSpec::gridworld7()),
            "fourroom11" => Some(GridSpec::fourroom11()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.width < 2 || self.height < 2 {
            return bad(format!("grid {}x{} smaller than 2x2", self.width, self.height));
        }
        if self.goal_cells.is_empty() {
            return bad("no goal cell".into());
        }
        let inside = |c: &Cell| c.0 < self.height && c.1 < self.width;
        let all = std::iter::once(&self.start)
            .chain(&self.goal_cells)
            .chain(&self.lava_cells)
            .chain(&self.obstacle_cells);
        for c in all {
            if !inside(c) {
                return bad(format!("cell {},{} out of bounds", c.0, c.1));
            }
        }
        if self.obstacle_cells.contains(&self.start) {
            return bad("start inside an obstacle".into());
        }
        if self.goal_cells.contains(&self.start) || self.lava_cells.contains(&self.start) {
            return bad("start overlaps a terminal cell".into());
        }
        let overlap = self.goal_cells.intersection(&self.lava_cells).next().is_some()
            || self.goal_cells.intersection(&self.obstacle_cells).next().is_some()
            || self.lava_cells.intersection(&self.obstacle_cells).next().is_some();
        if overlap {
            return bad("goal, lava and obstacle cells overlap".into());
        }
        Ok(())
    }

    /// Plain-text block: `key = value` lines, cell lists as `r,c; r,c`.
    pub fn to_text(&self) -> String {
        let list = |s: &BTreeSet<Cell>| {
            s.iter().map(|(r, c)| format!("{r},{c}")).collect::<Vec<_>>().join("; ")
        };
        format!(
            "width = {}\nheight = {}\nstart = {},{}\ngoals = {}\nlava = {}\nobstacles = {}\n",
            self.width,
            self.height,
            self.start.0,
            self.start.1,
            list(&self.goal_cells),
            list(&self.lava_cells),
            list(&self.obstacle_cells)
        )
    }

    pub fn parse(text: &str) -> Result<GridSpec> {
        let mut width = None;
        let mut height = None;
        let mut start = None;
        let mut goals = BTreeSet::new();
        let mut lava = BTreeSet::new();
        let mut obstacles = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: "<grid>".into(), line: i + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let value = value.trim();
            match key.trim() {
                "width" => width = Some(value.parse().map_err(|_| err(format!("bad width `{value}`")))?),
                "height" => height = Some(value.parse().map_err(|_| err(format!("bad height `{value}`")))?),
                "start" => start = Some(parse_cell(value).ok_or_else(|| err(format!("bad cell `{value}`")))?),
                "goals" => goals = parse_cells(value).ok_or_else(|| err(format!("bad cells `{value}`")))?,
                "lava" => lava = parse_cells(value).ok_or_else(|| err(format!("bad cells `{value}`")))?,
                "obstacles" => obstacles = parse_cells(value).ok_or_else(|| err(format!("bad cells `{value}`")))?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Validation(format!("grid spec missing `{k}`"));
        let spec = GridSpec {
            width: width.ok_or_else(|| missing("width"))?,
            height: height.ok_or_else(|| missing("height"))?,
            start: start.ok_or_else(|| missing("start"))?,
            goal_cells: goals,
            lava_cells: lava,
            obstacle_cells: obstacles,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_cell(s: &str) -> Option<Cell> {
    let (r, c) = s.trim().split_once(',')?;
    Some((r.trim().parse().ok()?, c.trim().parse().ok()?))
}

fn parse_cells(s: &str) -> Option<BTreeSet<Cell>> {
    s.split(';').map(str::trim).filter(|p| !p.is_empty()).map(parse_cell).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Free,
    Goal,
    Lava,
    Obstacle,
}

#[derive(Debug, Clone)]
pub struct Environment {
    name: String,
    spec: GridSpec,
    kinds: Vec<Kind>,
    valid: Vec<Vec<Action>>,
}

pub fn build_env(name: &str, spec: GridSpec) -> Result<Environment> {
    spec.validate()?;
    let n = spec.width * spec.height;
    let mut kinds = vec![Kind::Free; n];
    for &(r, c) in &spec.goal_cells {
        kinds[r * spec.width + c] = Kind::Goal;
    }
    for &(r, c) in &spec.lava_cells {
        kinds[r * spec.width + c] = Kind::Lava;
    }
    for &(r, c) in &spec.obstacle_cells {
        kinds[r * spec.width + c] = Kind::Obstacle;
    }
    let mut env = Environment { name: name.to_string(), spec, kinds, valid: Vec::new() };
    env.valid = (0..n)
        .map(|s| {
            if env.kinds[s] == Kind::Obstacle {
                return Vec::new();
            }
            Action::ALL.into_iter().filter(|&a| env.target(s, a).is_some()).collect()
        })
        .collect();
    Ok(env)
}

/// Resolves a built-in environment by name.
pub fn builtin_env(name: &str) -> Result<Environment> {
    let spec = GridSpec::builtin(name).ok_or_else(|| Error::UnknownEnv(name.to_string()))?;
    build_env(name, spec)
}

impl Environment {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn n_states(&self) -> usize {
        self.kinds.len()
    }

    pub fn index(&self, row: usize, col: usize) -> StateId {
        row * self.spec.width + col
    }

    pub fn coords(&self, s: StateId) -> Cell {
        (s / self.spec.width, s % self.spec.width)
    }

    pub fn start(&self) -> StateId {
        self.index(self.spec.start.0, self.spec.start.1)
    }

    pub fn reset(&self) -> StateId {
        self.start()
    }

    pub fn is_obstacle(&self, s: StateId) -> bool {
        self.kinds.get(s) == Some(&Kind::Obstacle)
    }

    pub fn is_goal(&self, s: StateId) -> bool {
        self.kinds.get(s) == Some(&Kind::Goal)
    }

    pub fn is_lava(&self, s: StateId) -> bool {
        self.kinds.get(s) == Some(&Kind::Lava)
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.is_goal(s) || self.is_lava(s)
    }

    fn check(&self, s: StateId) -> Result<()> {
        if s >= self.n_states() {
            Err(Error::StateOutOfRange(s))
        } else {
            Ok(())
        }
    }

    /// In-bounds, non-obstacle neighbour reached by `a`.
    fn target(&self, s: StateId, a: Action) -> Option<StateId> {
        let (r, c) = self.coords(s);
        let (dr, dc) = a.delta();
        let nr = r.checked_add_signed(dr)?;
        let nc = c.checked_add_signed(dc)?;
        if nr >= self.spec.height || nc >= self.spec.width {
            return None;
        }
        let t = self.index(nr, nc);
        (self.kinds[t] != Kind::Obstacle).then_some(t)
    }

    pub fn valid_actions(&self, s: StateId) -> Result<&[Action]> {
        self.check(s)?;
        Ok(&self.valid[s])
    }

    /// Moving into a wall or obstacle leaves the agent in place with reward 0.
    pub fn step(&self, s: StateId, a: Action) -> Result<StepOutcome> {
        self.check(s)?;
        if self.is_terminal(s) {
            return Err(Error::TerminalState(s));
        }
        let next = self.target(s, a).unwrap_or(s);
        let reward = match self.kinds[next] {
            Kind::Goal => 1.0,
            Kind::Lava => -1.0,
            _ => 0.0,
        };
        Ok(StepOutcome { next_state: next, reward, done: reward != 0.0 })
    }

    fn manhattan(&self, a: StateId, b: StateId) -> usize {
        let (ar, ac) = self.coords(a);
        let (br, bc) = self.coords(b);
        ar.abs_diff(br) + ac.abs_diff(bc)
    }

    /// A* over 4-connected non-obstacle cells. Terminal cells are passable:
    /// this is grid geometry, not episode dynamics.
    pub fn shortest_distance(&self, a: StateId, b: StateId) -> Result<Distance> {
        self.check(a)?;
        self.check(b)?;
        if self.is_obstacle(a) || self.is_obstacle(b) {
            return Err(Error::Validation(format!("distance query on obstacle ({a}, {b})")));
        }
        let n = self.n_states();
        let mut g = vec![usize::MAX; n];
        let mut closed = vec![false; n];
        let mut open = BinaryHeap::new();
        g[a] = 0;
        open.push(Reverse((self.manhattan(a, b), 0usize, a)));
        while let Some(Reverse((_, cost, s))) = open.pop() {
            if s == b {
                return Ok(Distance::Steps(cost));
            }
            if closed[s] {
                continue;
            }
            closed[s] = true;
            for &act in &self.valid[s] {
                let t = self.target(s, act).expect("valid action has a target");
                let c = cost + 1;
                if c < g[t] {
                    g[t] = c;
                    open.push(Reverse((c + self.manhattan(t, b), c, t)));
                }
            }
        }
        Ok(Distance::Unreachable)
    }

    /// States reachable from the start under the episode dynamics.
    pub fn reachable_states(&self) -> Vec<StateId> {
        let mut seen = vec![false; self.n_states()];
        let mut queue = VecDeque::from([self.start()]);
        seen[self.start()] = true;
        while let Some(s) = queue.pop_front() {
            if self.is_terminal(s) {
                continue;
            }
            for &a in &self.valid[s] {
                let t = self.target(s, a).expect("valid action has a target");
                if !seen[t] {
                    seen[t] = true;
                    queue.push_back(t);
                }
            }
        }
        (0..self.n_states()).filter(|&s| seen[s]).collect()
    }

    /// Reachable states where a decision is taken.
    pub fn decision_states(&self) -> Vec<StateId> {
        self.reachable_states().into_iter().filter(|&s| !self.is_terminal(s)).collect()
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.height() {
            let row: String = (0..self.width())
                .map(|c| {
                    let s = self.index(r, c);
                    if s == self.start() {
                        'S'
                    } else {
                        match self.kinds[s] {
                            Kind::Free => '.',
                            Kind::Goal => 'G',
                            Kind::Lava => 'L',
                            Kind::Obstacle => '#',
                        }
                    }
                })
                .collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}
