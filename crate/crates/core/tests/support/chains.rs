//! Chain builders and tampering helpers shared by the integration tests.

use pourl_core::environment::{MenuConfig, MenuOracle};
use pourl_core::{ActionId, AgentState, Block, Chain, GridWorld, GridWorldConfig, LearningConfig, Oracle, Payload};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn grid() -> GridWorld {
    GridWorld::new(GridWorldConfig::default()).unwrap()
}

/// `blocks` blocks mined by one seeded agent, with varied payloads and
/// authors.
pub fn mined_chain(oracle: &dyn Oracle, seed: u64, blocks: usize) -> Chain {
    let mut agent = AgentState::new(LearningConfig { seed, ..Default::default() }, oracle).unwrap();
    let mut chain = Chain::new(oracle);
    for i in 0..blocks {
        let payload = Payload::new(format!("tx {seed}/{i}").into_bytes()).unwrap();
        let block = agent.mine_one_block(oracle, chain.tip(), payload, (i % 3) as u32).unwrap();
        chain.append(block, oracle).unwrap();
    }
    chain
}

/// Block fields a tamperer can rewrite without touching the linkage
/// fields themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    State,
    Action,
    Reward,
    Payload,
    Author,
}

pub const FIELDS: [Field; 5] = [Field::State, Field::Action, Field::Reward, Field::Payload, Field::Author];

/// Changes `field` of `block` to a different value.
pub fn mutate(block: &mut Block, field: Field, rng: &mut impl Rng) {
    match field {
        Field::State => {
            let i = rng.random_range(0..block.state.0.len());
            block.state.0[i] += rng.random_range(1..4) as f64;
        }
        Field::Action => {
            block.action = ActionId(block.action.0.wrapping_add(rng.random_range(1..4)));
        }
        Field::Reward => {
            let delta = if rng.random_bool(0.5) { 1e-9 } else { rng.random_range(0.5..5.0) };
            block.reward += delta;
        }
        Field::Payload => {
            let bytes = block.payload.bytes_mut();
            if bytes.is_empty() || rng.random_bool(0.3) {
                bytes.push(rng.random());
            } else {
                let i = rng.random_range(0..bytes.len());
                bytes[i] ^= 1 << rng.random_range(0..8);
            }
        }
        Field::Author => {
            block.author = block.author.wrapping_add(rng.random_range(1..u32::MAX));
        }
    }
}

/// A random single-field mutation of a random non-tip block of a freshly
/// mined chain. Returns the tampered chain and the mutated height.
pub fn tamper_case(oracle: &dyn Oracle, seed: u64, blocks: usize) -> (Chain, u64, Field) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = mined_chain(oracle, rng.random(), blocks);
    let height = rng.random_range(0..chain.height());
    let field = FIELDS[rng.random_range(0..FIELDS.len())];
    let mut blocks = chain.into_blocks();
    mutate(&mut blocks[height as usize], field, &mut rng);
    (Chain::from_blocks_unchecked(blocks), height, field)
}

pub fn menu(rewards: &[f64]) -> MenuOracle {
    MenuOracle::new(MenuConfig { rewards: rewards.to_vec() }).unwrap()
}

/// Valid chain on a menu oracle whose block rewards are `rewards` in order.
pub fn reward_chain(oracle: &MenuOracle, rewards: &[f64], tag: &str) -> Chain {
    let mut chain = Chain::new(oracle);
    for (i, &r) in rewards.iter().enumerate() {
        let tip = chain.tip();
        let action = oracle.action_for(r).expect("reward on the menu");
        let block = Block {
            height: tip.height + 1,
            state: oracle.origin_state(tip),
            action,
            reward: r,
            payload: Payload::new(format!("{tag}{i}").into_bytes()).unwrap(),
            prev_hash: tip.hash(),
            author: 1,
        };
        chain.append(block, oracle).unwrap();
    }
    chain
}
