from langgraph.graph import StateGraph, END

from cost_analyzer import analyze_cost_node
from data_io import load_data_node
from final_output import final_output_node
from model_builder import build_model_node, load_checkpoint_node
from state import PipelineState
from trainer import evaluate_node, train_node


def _route(state: PipelineState) -> str:
    """出错时直接跳到最终输出节点"""
    return "error" if state.get("has_error", False) else "next"


def _chain(workflow: StateGraph, nodes):
    for source, target in zip(nodes, nodes[1:]):
        workflow.add_conditional_edges(
            source=source,
            path=_route,
            path_map={
                "next": target,
                "error": "final_output"
            }
        )
    workflow.add_edge(nodes[-1], "final_output")
    workflow.add_edge("final_output", END)


def build_train_graph():
    """训练流水线：数据加载 -> 模型构建 -> 成本分析 -> 训练 -> 最终输出"""
    workflow = StateGraph(PipelineState)

    workflow.add_node("load_data", load_data_node)
    workflow.add_node("build_model", build_model_node)
    workflow.add_node("analyze_cost", analyze_cost_node)
    workflow.add_node("train", train_node)
    workflow.add_node("final_output", final_output_node)

    workflow.set_entry_point("load_data")
    _chain(workflow, ["load_data", "build_model", "analyze_cost", "train"])

    return workflow.compile()


def build_eval_graph():
    """评估流水线：检查点加载 -> 数据加载 -> 评估 -> 最终输出"""
    workflow = StateGraph(PipelineState)

    workflow.add_node("load_checkpoint", load_checkpoint_node)
    workflow.add_node("load_data", load_data_node)
    workflow.add_node("evaluate", evaluate_node)
    workflow.add_node("final_output", final_output_node)

    workflow.set_entry_point("load_checkpoint")
    _chain(workflow, ["load_checkpoint", "load_data", "evaluate"])

    return workflow.compile()
